//! G-Ghost stage: a full-width first block, a thin complicated path, a cheap
//! branch from the first block's output, and an optional mix that injects
//! pooled complicated-path features into the cheap branch.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{Block, ConvBlockConfig};
use crate::error::{check_dim, Error, Result};
use crate::ghost::standalone;
use crate::params::ParamStore;
use crate::program::{Lowerer, Op, Program, Reg};
use crate::tensor::{self, ConvSpec, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheapOp {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    /// The last ghost-width channels of the first block's output.
    Identity,
    None,
}

impl CheapOp {
    pub fn kernel(&self) -> Option<usize> {
        match self {
            CheapOp::Conv1x1 => Some(1),
            CheapOp::Conv3x3 => Some(3),
            CheapOp::Conv5x5 => Some(5),
            CheapOp::Identity | CheapOp::None => None,
        }
    }
}

impl FromStr for CheapOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv1x1" | "1x1" => CheapOp::Conv1x1,
            "conv3x3" | "3x3" => CheapOp::Conv3x3,
            "conv5x5" | "5x5" => CheapOp::Conv5x5,
            "identity" => CheapOp::Identity,
            "none" => CheapOp::None,
            other => return Err(Error::config(format!("unknown cheap operation `{other}`"))),
        })
    }
}

/// round((1 - λ)·c), ties going to the complicated path.
pub fn complicated_width(channels: usize, lambda: f64) -> usize {
    ((1.0 - lambda) * channels as f64 + 0.5).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GGhostStageConfig {
    pub lambda: f64,
    pub cheap: CheapOp,
    pub mix: bool,
    /// Apply the last block at full width after the concat instead of
    /// making it part of the thin path.
    #[serde(default)]
    pub tail: bool,
    /// Full-width blocks; the first sets the stride and input width.
    pub blocks: Vec<Block>,
}

impl GGhostStageConfig {
    pub fn new(blocks: Vec<Block>, lambda: f64, cheap: CheapOp, mix: bool) -> Self {
        GGhostStageConfig {
            lambda,
            cheap,
            mix,
            tail: false,
            blocks,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, Block::in_channels)
    }

    pub fn channels(&self) -> usize {
        self.blocks.first().map_or(0, Block::out_channels)
    }

    pub fn stride(&self) -> usize {
        self.blocks.first().map_or(1, Block::stride)
    }

    pub fn complicated_width(&self) -> usize {
        complicated_width(self.channels(), self.lambda)
    }

    pub fn ghost_width(&self) -> usize {
        self.channels() - self.complicated_width().min(self.channels())
    }

    /// True when the stage is split into complicated and cheap paths.
    pub fn is_split(&self) -> bool {
        self.num_blocks() >= 2 && self.ghost_width() > 0
    }

    /// Blocks run at complicated width.
    pub fn thin_count(&self) -> usize {
        let n = self.num_blocks();
        if self.tail {
            n.saturating_sub(2)
        } else {
            n.saturating_sub(1)
        }
    }

    /// Plain (non-residual) stages feed the first thin block all of Y1, so
    /// it maps c → cᶜ. Residual stages feed it the first cᶜ channels of Y1,
    /// which keeps every thin block's identity shortcut.
    pub fn thin_reads_full(&self) -> bool {
        self.blocks.get(1).is_some_and(|b| !b.is_residual())
    }

    pub fn thin_block(&self, i: usize) -> Block {
        let t = self.blocks[i].thin(self.complicated_width(), self.channels());
        match t {
            Block::Conv(b) if i == 1 && self.thin_reads_full() => Block::Conv(ConvBlockConfig {
                in_channels: self.channels(),
                ..b
            }),
            other => other,
        }
    }

    /// Width of the mix input (all thin-block outputs stacked).
    pub fn mix_in_width(&self) -> usize {
        self.thin_count() * self.complicated_width()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_blocks();
        if n == 0 {
            return Err(Error::config("a stage needs at least one block"));
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "ghost ratio λ must be in [0, 1), got {}",
                self.lambda
            )));
        }
        let c = self.channels();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if i > 0 && (b.in_channels() != c || b.out_channels() != c || b.stride() != 1) {
                return Err(Error::config(format!(
                    "stage block {} must map {c} -> {c} channels at stride 1",
                    i + 1
                )));
            }
        }
        if !self.is_split() {
            return Ok(());
        }
        if self.complicated_width() < 1 {
            return Err(Error::config(format!(
                "λ = {} leaves no complicated channels out of {c}",
                self.lambda
            )));
        }
        if self.cheap == CheapOp::None {
            return Err(Error::config("cheap operation `none` contradicts λ > 0"));
        }
        if self.tail && n < 3 {
            return Err(Error::config(
                "a stage with a tail block needs at least 3 blocks",
            ));
        }
        if self.mix && self.thin_count() == 0 {
            return Err(Error::config("mix needs at least one thin block"));
        }
        for i in 1..=self.thin_count() {
            self.thin_block(i).validate()?;
        }
        Ok(())
    }

    pub fn program(&self) -> Result<Program> {
        self.validate()?;
        Ok(standalone("stage", |l, x| l.gghost_stage(x, "stage", self)))
    }
}

/// Affine map from pooled complicated-path features to one offset per ghost channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MixState {
    /// (ghost width, input width, 1, 1)
    pub weight: Tensor,
    /// (1, ghost width, 1, 1)
    pub bias: Tensor,
}

impl MixState {
    pub fn zeros(in_width: usize, out_width: usize) -> Self {
        MixState {
            weight: Tensor::zeros(Shape::new(out_width, in_width, 1, 1)),
            bias: Tensor::zeros(Shape::new(1, out_width, 1, 1)),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape().n
    }
}

/// τ = W · avgpool(concat(intermediates)) + b, shape (N, ghost width, 1, 1).
pub fn mix_forward(intermediates: &[&Tensor], state: &MixState) -> Result<Tensor> {
    let width: usize = intermediates.iter().map(|t| t.shape().c).sum();
    check_dim("mix", "C", state.in_width(), width)?;
    let z = tensor::concat_channels(intermediates)?;
    let pooled = tensor::global_avg_pool(&z);
    tensor::fully_connected(&pooled, &state.weight, Some(&state.bias))
}

impl Lowerer {
    pub fn gghost_stage(&mut self, x: Reg, name: &str, cfg: &GGhostStageConfig) -> Reg {
        let n = cfg.num_blocks();
        let block_name = |i: usize| format!("{name}.block{}", i + 1);
        let y1 = self.block(x, &block_name(0), &cfg.blocks[0]);
        self.tap(&block_name(0), y1);
        if !cfg.is_split() {
            let mut y = y1;
            for (i, b) in cfg.blocks.iter().enumerate().skip(1) {
                y = self.block(y, &block_name(i), b);
                self.tap(&block_name(i), y);
            }
            return y;
        }

        let c = cfg.channels();
        let cc = cfg.complicated_width();
        let cg = cfg.ghost_width();
        let mut t = if cfg.thin_reads_full() {
            y1
        } else {
            self.emit(Op::Slice { start: 0, len: cc }, vec![y1])
        };
        let mut thin = Vec::new();
        for i in 1..=cfg.thin_count() {
            t = self.block(t, &block_name(i), &cfg.thin_block(i));
            self.tap(&block_name(i), t);
            thin.push(t);
        }

        let mut g = match cfg.cheap.kernel() {
            Some(k) => self.conv_bn(
                y1,
                &format!("{name}.cheap"),
                ConvSpec::new(c, cg, k, 1),
                false,
            ),
            None => self.emit(
                Op::Slice {
                    start: c - cg,
                    len: cg,
                },
                vec![y1],
            ),
        };
        if cfg.mix {
            let z = if thin.len() == 1 {
                thin[0]
            } else {
                self.emit(Op::Concat, thin.clone())
            };
            let pooled = self.emit(Op::GlobalAvgPool, vec![z]);
            let tau = self.fc(pooled, &format!("{name}.mix"), cfg.mix_in_width(), cg, true);
            g = self.emit(Op::AddBroadcast, vec![g, tau]);
        }
        g = self.relu(g);
        let mut out = self.emit(Op::Concat, vec![t, g]);
        self.tap(&format!("{name}.concat"), out);
        if cfg.tail {
            out = self.block(out, &block_name(n - 1), &cfg.blocks[n - 1]);
            self.tap(&block_name(n - 1), out);
        }
        out
    }
}

/// Inference-mode forward of one stage; weights named as in [`GGhostStageConfig::program`].
pub fn gghost_stage_forward(
    x: &Tensor,
    cfg: &GGhostStageConfig,
    weights: &ParamStore,
) -> Result<Tensor> {
    check_dim("gghost_stage", "C", cfg.in_channels(), x.shape().c)?;
    let p = cfg.program()?;
    Ok(p.forward(x, weights, false)?.values[p.output].clone())
}

/// Closed-form FLOPs and parameter reduction ratios of converting a stage:
/// block 1 full, block 2 scaled by (1−λ), blocks 3..n by (1−λ)², plus the cheap op.
pub fn stage_reduction_ratios(
    per_block_flops: &[f64],
    per_block_params: &[f64],
    lambda: f64,
    cheap_flops: f64,
    cheap_params: f64,
) -> Result<(f64, f64)> {
    if per_block_flops.is_empty() || per_block_flops.len() != per_block_params.len() {
        return Err(Error::config(
            "per-block cost lists must be non-empty and of equal length",
        ));
    }
    let all = per_block_flops
        .iter()
        .chain(per_block_params)
        .chain([&cheap_flops, &cheap_params]);
    if all.clone().any(|v| *v < 0.0 || !v.is_finite()) || !(0.0..1.0).contains(&lambda) {
        return Err(Error::config("costs must be finite and >= 0, λ in [0, 1)"));
    }
    let ratio = |costs: &[f64], cheap: f64| {
        let keep = 1.0 - lambda;
        let reduced: f64 = costs
            .iter()
            .enumerate()
            .map(|(i, f)| match i {
                0 => *f,
                1 => keep * f,
                _ => keep * keep * f,
            })
            .sum();
        costs.iter().sum::<f64>() / (reduced + cheap)
    };
    Ok((
        ratio(per_block_flops, cheap_flops),
        ratio(per_block_params, cheap_params),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ConvBlockConfig;
    use crate::tensor::Scalar;

    fn conv_blocks(cin: usize, c: usize, n: usize) -> Vec<Block> {
        (0..n)
            .map(|i| {
                Block::Conv(ConvBlockConfig {
                    in_channels: if i == 0 { cin } else { c },
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    ghost: None,
                })
            })
            .collect()
    }

    #[test]
    fn widths() {
        assert_eq!(complicated_width(80, 0.4), 48);
        assert_eq!(complicated_width(5, 0.5), 3);
        assert_eq!(complicated_width(16, 0.0), 16);
        let cfg = GGhostStageConfig::new(conv_blocks(3, 10, 3), 0.3, CheapOp::Conv1x1, true);
        assert_eq!(cfg.complicated_width() + cfg.ghost_width(), 10);
    }

    #[test]
    fn invalid_stages() {
        let mut cfg = GGhostStageConfig::new(conv_blocks(3, 8, 2), 0.5, CheapOp::None, false);
        assert!(cfg.validate().is_err());
        cfg.cheap = CheapOp::Conv1x1;
        cfg.validate().unwrap();
        cfg.tail = true;
        assert!(cfg.validate().is_err());
        cfg.tail = false;
        cfg.lambda = 1.0;
        assert!(cfg.validate().is_err());
        cfg.lambda = 0.95;
        assert!(cfg.validate().is_err());
        assert!("conv7x7".parse::<CheapOp>().is_err());
    }

    #[test]
    fn output_shape() {
        let mut cfg = GGhostStageConfig::new(conv_blocks(3, 8, 4), 0.5, CheapOp::Conv3x3, true);
        let p = cfg.program().unwrap();
        assert_eq!(
            p.shapes(Shape::new(2, 3, 6, 6)).unwrap()[p.output],
            Shape::new(2, 8, 6, 6)
        );
        cfg.tail = true;
        let p = cfg.program().unwrap();
        assert_eq!(
            p.shapes(Shape::new(2, 3, 6, 6)).unwrap()[p.output],
            Shape::new(2, 8, 6, 6)
        );
    }

    #[test]
    fn identity_cheap_copies_relu_of_first_block() {
        let cfg = GGhostStageConfig::new(conv_blocks(3, 4, 2), 0.5, CheapOp::Identity, false);
        let p = cfg.program().unwrap();
        let store = ParamStore::init(&p.decls, 9);
        let x = Tensor::from_fn(Shape::new(1, 3, 4, 4), |i| (i as Scalar * 0.3).sin());
        let trace = p.forward(&x, &store, false).unwrap();
        let y1 = trace.tap(&p, "stage.block1").unwrap();
        let out = &trace.values[p.output];
        assert_eq!(out.plane(0, 2), y1.plane(0, 2));
        assert_eq!(out.plane(0, 3), y1.plane(0, 3));
    }

    #[test]
    fn mix_of_zeros_is_bias() {
        let mut st = MixState::zeros(6, 2);
        st.bias = Tensor::vector(vec![0.5, -1.0]);
        st.weight = Tensor::full(st.weight.shape(), 0.3);
        let a = Tensor::zeros(Shape::new(1, 3, 2, 2));
        let tau = mix_forward(&[&a, &a], &st).unwrap();
        assert_eq!(tau.data(), &[0.5, -1.0]);
        assert!(matches!(
            mix_forward(&[&a], &st),
            Err(Error::Dimension { axis: "C", .. })
        ));
    }

    #[test]
    fn reduction_ratio_formula() {
        let (rf, rp) = stage_reduction_ratios(&[1.0; 9], &[2.0; 9], 0.5, 0.0, 0.0).unwrap();
        assert!((rf - 9.0 / 3.25).abs() < 1e-12);
        assert!((rp - 9.0 / 3.25).abs() < 1e-12);
        let (rf, rp) = stage_reduction_ratios(&[3.0, 1.0, 2.0], &[1.0; 3], 0.0, 0.0, 0.0).unwrap();
        assert_eq!((rf, rp), (1.0, 1.0));
        assert!(stage_reduction_ratios(&[-1.0], &[1.0], 0.5, 0.0, 0.0).is_err());
        assert!(stage_reduction_ratios(&[], &[], 0.5, 0.0, 0.0).is_err());
    }
}
