//! Straight-line register programs.
//!
//! Every network, block and module is lowered once into a list of primitive
//! instructions. The same list drives shape inference, cost counting, the
//! forward pass and the backward pass, so the numbers reported by the cost
//! model always describe the code that actually runs.

use indexmap::IndexMap;

use crate::error::{check_dim, Error, Result};
use crate::params::{Grads, Init, ParamDecl, ParamStore};
use crate::tensor::{self, BatchNormState, BnCache, ConvSpec, PoolSpec, Scalar, Shape, Tensor};

pub type Reg = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv {
        spec: ConvSpec,
        weight: String,
        bias: Option<String>,
    },
    /// Parameters live under `{prefix}.gamma`, `.beta`, `.running_mean`, `.running_var`.
    BatchNorm {
        prefix: String,
        channels: usize,
    },
    Relu,
    HardSigmoid,
    Fc {
        in_features: usize,
        out_features: usize,
        weight: String,
        bias: Option<String>,
    },
    GlobalAvgPool,
    MaxPool(PoolSpec),
    /// inputs: [a, b]
    Add,
    /// inputs: [x, v] with v of shape (N, C, 1, 1)
    AddBroadcast,
    /// inputs: [x, gate] with gate of shape (N, C, 1, 1)
    Scale,
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu => "relu",
            Op::HardSigmoid => "hard_sigmoid",
            Op::Fc { .. } => "fc",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::MaxPool(_) => "max_pool",
            Op::Add => "add",
            Op::AddBroadcast => "add_broadcast",
            Op::Scale => "scale",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instr {
    pub op: Op,
    pub inputs: Vec<Reg>,
    pub output: Reg,
    /// Index into [`Program::nodes`] of the graph node this came from.
    pub node: usize,
}

/// Counted cost of one instruction at batch size 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct InstrCost {
    pub params: u64,
    pub flops: u64,
    pub activations: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Program {
    pub instrs: Vec<Instr>,
    pub decls: Vec<ParamDecl>,
    pub nodes: Vec<String>,
    /// Named registers that analysis tools may read after a forward pass.
    pub taps: IndexMap<String, Reg>,
    pub num_regs: usize,
    pub output: Reg,
}

pub const INPUT: Reg = 0;

/// Values of every register after a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub values: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl Trace {
    pub fn output(&self, program: &Program) -> &Tensor {
        &self.values[program.output]
    }

    pub fn tap(&self, program: &Program, name: &str) -> Result<&Tensor> {
        let reg = program
            .taps
            .get(name)
            .ok_or_else(|| Error::graph(name, "no such node"))?;
        Ok(&self.values[*reg])
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Grads,
}

fn bn_state(store: &ParamStore, prefix: &str) -> Result<BatchNormState> {
    let get = |s: &str| -> Result<Vec<Scalar>> {
        Ok(store.get(&format!("{prefix}.{s}"))?.data().to_vec())
    };
    Ok(BatchNormState {
        gamma: get("gamma")?,
        beta: get("beta")?,
        running_mean: get("running_mean")?,
        running_var: get("running_var")?,
        eps: tensor::BN_EPS,
        momentum: tensor::BN_MOMENTUM,
    })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn accumulate_param(grads: &mut Grads, name: &str, g: Tensor) -> Result<()> {
    match grads.get_mut(name) {
        Some(t) => t.add_assign(&g),
        None => {
            grads.insert(name.to_string(), g);
            Ok(())
        }
    }
}

impl Program {
    pub fn node_name(&self, instr: &Instr) -> &str {
        &self.nodes[instr.node]
    }

    /// Output shape of an instruction given its input shapes.
    fn infer(&self, instr: &Instr, ins: &[Shape]) -> Result<Shape> {
        let x = ins[0];
        Ok(match &instr.op {
            Op::Conv { spec, .. } => spec.output_shape(x)?,
            Op::BatchNorm { channels, .. } => {
                check_dim("batchnorm", "C", *channels, x.c)?;
                x
            }
            Op::Relu | Op::HardSigmoid => x,
            Op::Fc {
                in_features,
                out_features,
                ..
            } => {
                check_dim("fully_connected", "C", *in_features, x.c)?;
                check_dim("fully_connected", "H", 1, x.h)?;
                check_dim("fully_connected", "W", 1, x.w)?;
                Shape::new(x.n, *out_features, 1, 1)
            }
            Op::GlobalAvgPool => Shape::new(x.n, x.c, 1, 1),
            Op::MaxPool(spec) => spec.output_shape(x)?,
            Op::Add => {
                tensor::same_shape("add", x, ins[1])?;
                x
            }
            Op::AddBroadcast | Op::Scale => {
                tensor::same_shape(instr.op.kind(), Shape::new(x.n, x.c, 1, 1), ins[1])?;
                x
            }
            Op::Concat => {
                let mut c = 0;
                for s in ins {
                    check_dim("concat_channels", "N", x.n, s.n)?;
                    check_dim("concat_channels", "H", x.h, s.h)?;
                    check_dim("concat_channels", "W", x.w, s.w)?;
                    c += s.c;
                }
                x.with_channels(c)
            }
            Op::Slice { start, len } => {
                if start + len > x.c {
                    return Err(Error::Dimension {
                        op: "slice_channels",
                        axis: "C",
                        expected: start + len,
                        got: x.c,
                    });
                }
                x.with_channels(*len)
            }
        })
    }

    /// Shape of every register for the given input shape. Failures name the
    /// graph node that produced them.
    pub fn shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        let mut shapes = vec![Shape::new(0, 0, 0, 0); self.num_regs];
        shapes[INPUT] = input;
        for instr in &self.instrs {
            let ins: Vec<Shape> = instr.inputs.iter().map(|&r| shapes[r]).collect();
            shapes[instr.output] = self
                .infer(instr, &ins)
                .map_err(|e| Error::graph(self.node_name(instr), e.to_string()))?;
        }
        Ok(shapes)
    }

    /// Per-instruction cost for a single sample of `input` (its batch axis is ignored).
    pub fn costs(&self, input: Shape) -> Result<Vec<InstrCost>> {
        let shapes = self.shapes(Shape { n: 1, ..input })?;
        Ok(self
            .instrs
            .iter()
            .map(|instr| {
                let out = shapes[instr.output];
                let spatial = (out.h * out.w) as u64;
                match &instr.op {
                    Op::Conv { spec, .. } => {
                        let w = spec.weight_count() as u64;
                        InstrCost {
                            params: w + if spec.bias {
                                spec.out_channels as u64
                            } else {
                                0
                            },
                            flops: w * spatial,
                            activations: out.sample() as u64,
                        }
                    }
                    Op::BatchNorm { channels, .. } => InstrCost {
                        params: 2 * *channels as u64,
                        ..Default::default()
                    },
                    Op::Fc {
                        in_features,
                        out_features,
                        bias,
                        ..
                    } => {
                        let w = (*in_features * *out_features) as u64;
                        InstrCost {
                            params: w + if bias.is_some() {
                                *out_features as u64
                            } else {
                                0
                            },
                            flops: w,
                            activations: 0,
                        }
                    }
                    _ => InstrCost::default(),
                }
            })
            .collect())
    }

    pub fn forward(&self, x: &Tensor, store: &ParamStore, training: bool) -> Result<Trace> {
        let mut values: Vec<Option<Tensor>> = vec![None; self.num_regs];
        let mut bn = vec![None; self.instrs.len()];
        values[INPUT] = Some(x.clone());
        for (idx, instr) in self.instrs.iter().enumerate() {
            let ins: Vec<&Tensor> = instr
                .inputs
                .iter()
                .map(|&r| {
                    values[r]
                        .as_ref()
                        .expect("registers are written before use")
                })
                .collect();
            let y = match &instr.op {
                Op::Conv { spec, weight, bias } => {
                    let b = bias.as_ref().map(|b| store.get(b)).transpose()?;
                    tensor::conv2d_forward(ins[0], spec, store.get(weight)?, b)?
                }
                Op::BatchNorm { prefix, .. } => {
                    let state = bn_state(store, prefix)?;
                    let (y, cache) = tensor::batchnorm_forward(ins[0], &state, training)?;
                    bn[idx] = Some(cache);
                    y
                }
                Op::Relu => tensor::relu(ins[0]),
                Op::HardSigmoid => tensor::hard_sigmoid(ins[0]),
                Op::Fc { weight, bias, .. } => {
                    let b = bias.as_ref().map(|b| store.get(b)).transpose()?;
                    tensor::fully_connected(ins[0], store.get(weight)?, b)?
                }
                Op::GlobalAvgPool => tensor::global_avg_pool(ins[0]),
                Op::MaxPool(spec) => tensor::max_pool(ins[0], spec)?,
                Op::Add => tensor::add(ins[0], ins[1])?,
                Op::AddBroadcast => tensor::add_broadcast_channel(ins[0], ins[1])?,
                Op::Scale => tensor::scale_channels(ins[0], ins[1])?,
                Op::Concat => tensor::concat_channels(&ins)?,
                Op::Slice { start, len } => tensor::slice_channels(ins[0], *start, *len)?,
            };
            values[instr.output] = Some(y);
        }
        Ok(Trace {
            values: values
                .into_iter()
                .map(|v| v.unwrap_or_else(|| Tensor::zeros(Shape::new(0, 0, 0, 0))))
                .collect(),
            bn,
        })
    }

    /// Folds the batch statistics of a training-mode trace into the stored
    /// running estimates.
    pub fn update_running_stats(&self, trace: &Trace, store: &mut ParamStore) -> Result<()> {
        for (instr, cache) in self.instrs.iter().zip(&trace.bn) {
            if let (Op::BatchNorm { prefix, .. }, Some(cache)) = (&instr.op, cache) {
                let mut state = bn_state(store, prefix)?;
                state.update_running(cache);
                store.set(&format!("{prefix}.running_mean"), state.running_mean)?;
                store.set(&format!("{prefix}.running_var"), state.running_var)?;
            }
        }
        Ok(())
    }

    /// Reverse pass from `grad_out` at the program output.
    pub fn backward(
        &self,
        trace: &Trace,
        store: &ParamStore,
        grad_out: &Tensor,
    ) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.num_regs];
        let mut params = Grads::new();
        tensor::same_shape(
            "backward",
            trace.values[self.output].shape(),
            grad_out.shape(),
        )?;
        grads[self.output] = Some(grad_out.clone());
        for (idx, instr) in self.instrs.iter().enumerate().rev() {
            let Some(g) = grads[instr.output].take() else {
                continue;
            };
            let x = &trace.values[instr.inputs[0]];
            let push = |grads: &mut Vec<Option<Tensor>>, k: usize, t: Tensor| {
                accumulate(&mut grads[instr.inputs[k]], t)
            };
            match &instr.op {
                Op::Conv { spec, weight, bias } => {
                    let cg = tensor::conv2d_backward(x, spec, store.get(weight)?, &g)?;
                    accumulate_param(&mut params, weight, cg.weights)?;
                    if let (Some(name), Some(gb)) = (bias, cg.bias) {
                        accumulate_param(&mut params, name, gb.reshape(store.get(name)?.shape())?)?;
                    }
                    push(&mut grads, 0, cg.x)?;
                }
                Op::BatchNorm { prefix, channels } => {
                    let state = bn_state(store, prefix)?;
                    let cache = trace.bn[idx]
                        .as_ref()
                        .expect("forward stores a cache per batchnorm");
                    let bg = tensor::batchnorm_backward(&state, cache, &g)?;
                    let shape = Shape::new(1, *channels, 1, 1);
                    accumulate_param(
                        &mut params,
                        &format!("{prefix}.gamma"),
                        Tensor::from_vec(shape, bg.gamma)?,
                    )?;
                    accumulate_param(
                        &mut params,
                        &format!("{prefix}.beta"),
                        Tensor::from_vec(shape, bg.beta)?,
                    )?;
                    push(&mut grads, 0, bg.x)?;
                }
                Op::Relu => push(&mut grads, 0, tensor::relu_backward(x, &g)?)?,
                Op::HardSigmoid => push(&mut grads, 0, tensor::hard_sigmoid_backward(x, &g)?)?,
                Op::Fc { weight, bias, .. } => {
                    let fg = tensor::fully_connected_backward(x, store.get(weight)?, &g)?;
                    accumulate_param(&mut params, weight, fg.weights)?;
                    if let Some(name) = bias {
                        accumulate_param(&mut params, name, fg.bias)?;
                    }
                    push(&mut grads, 0, fg.x)?;
                }
                Op::GlobalAvgPool => push(
                    &mut grads,
                    0,
                    tensor::global_avg_pool_backward(x.shape(), &g)?,
                )?,
                Op::MaxPool(spec) => push(&mut grads, 0, tensor::max_pool_backward(x, spec, &g)?)?,
                Op::Add => {
                    push(&mut grads, 0, g.clone())?;
                    push(&mut grads, 1, g)?;
                }
                Op::AddBroadcast => {
                    push(&mut grads, 1, tensor::add_backward_broadcast(&g))?;
                    push(&mut grads, 0, g)?;
                }
                Op::Scale => {
                    let gate = &trace.values[instr.inputs[1]];
                    let (gx, gg) = tensor::scale_channels_backward(x, gate, &g)?;
                    push(&mut grads, 0, gx)?;
                    push(&mut grads, 1, gg)?;
                }
                Op::Concat => {
                    let widths: Vec<usize> = instr
                        .inputs
                        .iter()
                        .map(|&r| trace.values[r].shape().c)
                        .collect();
                    for (k, part) in tensor::concat_channels_backward(&g, &widths)?
                        .into_iter()
                        .enumerate()
                    {
                        push(&mut grads, k, part)?;
                    }
                }
                Op::Slice { start, len } => {
                    let s = x.shape();
                    let p = s.plane();
                    let mut gx = Tensor::zeros(s);
                    for n in 0..s.n {
                        let dst = (n * s.c + start) * p;
                        let src = n * len * p;
                        gx.data_mut()[dst..dst + len * p]
                            .copy_from_slice(&g.data()[src..src + len * p]);
                    }
                    push(&mut grads, 0, gx)?;
                }
            }
        }
        let input = grads[INPUT]
            .take()
            .unwrap_or_else(|| Tensor::zeros(trace.values[INPUT].shape()));
        Ok(Gradients { input, params })
    }
}

/// Incrementally builds a [`Program`] and the parameters it declares.
#[derive(Debug)]
pub struct Lowerer {
    prog: Program,
    node: usize,
}

impl Default for Lowerer {
    fn default() -> Self {
        Self::new()
    }
}

impl Lowerer {
    pub fn new() -> Self {
        Lowerer {
            prog: Program {
                num_regs: 1,
                nodes: vec!["input".to_string()],
                ..Default::default()
            },
            node: 0,
        }
    }

    /// Attributes the following instructions to a new graph node.
    pub fn begin_node(&mut self, name: &str) {
        self.prog.nodes.push(name.to_string());
        self.node = self.prog.nodes.len() - 1;
    }

    pub fn emit(&mut self, op: Op, inputs: Vec<Reg>) -> Reg {
        let output = self.prog.num_regs;
        self.prog.num_regs += 1;
        self.prog.instrs.push(Instr {
            op,
            inputs,
            output,
            node: self.node,
        });
        output
    }

    pub fn declare(&mut self, name: String, shape: Shape, init: Init, trainable: bool) -> String {
        self.prog.decls.push(ParamDecl {
            name: name.clone(),
            shape,
            init,
            trainable,
        });
        name
    }

    pub fn tap(&mut self, name: &str, reg: Reg) {
        self.prog.taps.insert(name.to_string(), reg);
    }

    /// Convolution with weights at `{name}.weight` and optional `{name}.bias`.
    pub fn conv(&mut self, x: Reg, name: &str, spec: ConvSpec) -> Reg {
        let fan_in = spec.in_per_group() * spec.kernel * spec.kernel;
        let weight = self.declare(
            format!("{name}.weight"),
            spec.weight_shape(),
            Init::He { fan_in },
            true,
        );
        let bias = spec.bias.then(|| {
            self.declare(
                format!("{name}.bias"),
                Shape::new(1, spec.out_channels, 1, 1),
                Init::Zeros,
                true,
            )
        });
        self.emit(Op::Conv { spec, weight, bias }, vec![x])
    }

    pub fn batchnorm(&mut self, x: Reg, prefix: &str, channels: usize) -> Reg {
        let shape = Shape::new(1, channels, 1, 1);
        self.declare(format!("{prefix}.gamma"), shape, Init::Ones, true);
        self.declare(format!("{prefix}.beta"), shape, Init::Zeros, true);
        self.declare(format!("{prefix}.running_mean"), shape, Init::Zeros, false);
        self.declare(format!("{prefix}.running_var"), shape, Init::Ones, false);
        self.emit(
            Op::BatchNorm {
                prefix: prefix.to_string(),
                channels,
            },
            vec![x],
        )
    }

    pub fn relu(&mut self, x: Reg) -> Reg {
        self.emit(Op::Relu, vec![x])
    }

    /// conv → BN → optional ReLU; BN parameters under `{name}.bn`.
    pub fn conv_bn(&mut self, x: Reg, name: &str, spec: ConvSpec, relu: bool) -> Reg {
        let c = spec.out_channels;
        let y = self.conv(x, name, spec);
        let y = self.batchnorm(y, &format!("{name}.bn"), c);
        if relu {
            self.relu(y)
        } else {
            y
        }
    }

    pub fn fc(
        &mut self,
        x: Reg,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Reg {
        let weight = self.declare(
            format!("{name}.weight"),
            Shape::new(out_features, in_features, 1, 1),
            Init::He {
                fan_in: in_features,
            },
            true,
        );
        let bias = bias.then(|| {
            self.declare(
                format!("{name}.bias"),
                Shape::new(1, out_features, 1, 1),
                Init::Zeros,
                true,
            )
        });
        self.emit(
            Op::Fc {
                in_features,
                out_features,
                weight,
                bias,
            },
            vec![x],
        )
    }

    pub fn finish(mut self, output: Reg) -> Program {
        self.prog.output = output;
        self.prog
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Program {
        let mut l = Lowerer::new();
        l.begin_node("c");
        let y = l.conv_bn(INPUT, "c", ConvSpec::new(2, 3, 3, 1), true);
        l.begin_node("head");
        let p = l.emit(Op::GlobalAvgPool, vec![y]);
        let out = l.fc(p, "fc", 3, 2, true);
        l.finish(out)
    }

    #[test]
    fn shapes_and_costs() {
        let p = tiny();
        let shapes = p.shapes(Shape::new(4, 2, 5, 5)).unwrap();
        assert_eq!(shapes[p.output], Shape::new(4, 2, 1, 1));
        let costs = p.costs(Shape::new(4, 2, 5, 5)).unwrap();
        assert_eq!(costs[0].params, 54);
        assert_eq!(costs[0].flops, 54 * 25);
        assert_eq!(costs[0].activations, 75);
        assert_eq!(costs[1].params, 6);
        assert_eq!(costs.last().unwrap().params, 8);
    }

    #[test]
    fn shape_errors_name_the_node() {
        let p = tiny();
        match p.shapes(Shape::new(1, 3, 5, 5)) {
            Err(Error::Graph { node, reason }) => {
                assert_eq!(node, "c");
                assert!(reason.contains("`C`"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unused_branch_gets_no_gradient_but_input_does() {
        let p = tiny();
        let store = ParamStore::init(&p.decls, 1);
        let x = Tensor::from_fn(Shape::new(2, 2, 5, 5), |i| (i as Scalar).cos());
        let trace = p.forward(&x, &store, true).unwrap();
        let g = p
            .backward(&trace, &store, &Tensor::full(Shape::new(2, 2, 1, 1), 1.0))
            .unwrap();
        assert_eq!(g.input.shape(), x.shape());
        assert_eq!(g.params.len(), 5);
        assert!(g.params.contains_key("c.bn.gamma"));
        assert!(!g.params.contains_key("c.bn.running_mean"));
    }

    #[test]
    fn running_stats_move_only_in_training() {
        let p = tiny();
        let mut store = ParamStore::init(&p.decls, 1);
        let x = Tensor::from_fn(Shape::new(2, 2, 5, 5), |i| (i as Scalar).sin() + 1.0);
        let before = store.clone();
        let trace = p.forward(&x, &store, false).unwrap();
        p.update_running_stats(&trace, &mut store).unwrap();
        assert_eq!(store, before);
        let trace = p.forward(&x, &store, true).unwrap();
        p.update_running_stats(&trace, &mut store).unwrap();
        assert_ne!(
            store.get("c.bn.running_mean").unwrap(),
            before.get("c.bn.running_mean").unwrap()
        );
    }
}
