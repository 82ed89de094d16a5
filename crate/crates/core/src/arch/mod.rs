//! Architecture graphs: a JSON-serializable DAG of layer nodes that lowers to
//! an executable [`Program`].

mod convert;
mod zoo;

pub use convert::{c_ghostify, detect_stages, g_ghostify, stage_block};
pub use zoo::{
    build_c_ghostnet, build_c_ghostnet_with, build_g_ghostnet, build_g_ghostnet_with, build_named,
    build_named_with, build_resnet, build_vgg16_cifar, CGhostNetOptions, GGhostNetOptions,
    WidthMultiplier, ZooOptions, ZOO,
};

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::gghost::GGhostStageConfig;
use crate::ghost::{GhostModuleConfig, SEConfig};
use crate::params::ParamStore;
use crate::program::{Lowerer, Op, Program, Reg, INPUT};
use crate::tensor::{ConvSpec, PoolSpec, Shape};

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Convolution with optional BN and ReLU after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub bn: bool,
    #[serde(default)]
    pub relu: bool,
}

impl ConvLayerConfig {
    /// conv → BN → ReLU with "same" padding.
    pub fn standard(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvLayerConfig {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: None,
            groups: 1,
            bias: false,
            bn: true,
            relu: true,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding.unwrap_or(self.kernel / 2),
            groups: self.groups,
            bias: self.bias,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcConfig {
    pub in_features: usize,
    pub out_features: usize,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub bn: bool,
    #[serde(default)]
    pub relu: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddConfig {
    #[serde(default)]
    pub relu: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayerConfig),
    GhostModule(GhostModuleConfig),
    Se(SEConfig),
    Block(Block),
    GGhostStage(GGhostStageConfig),
    MaxPool(PoolSpec),
    GlobalAvgPool,
    Fc(FcConfig),
    Add(AddConfig),
    Concat,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::GhostModule(_) => "ghost_module",
            Layer::Se(_) => "se",
            Layer::Block(Block::Conv(_)) => "conv_block",
            Layer::Block(Block::Basic(_)) => "basic_block",
            Layer::Block(Block::Bottleneck(_)) => "bottleneck",
            Layer::Block(Block::Expand(_)) => "expand_block",
            Layer::Block(Block::GhostBottleneck(_)) => "ghost_bottleneck",
            Layer::GGhostStage(_) => "gghost_stage",
            Layer::MaxPool(_) => "max_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Fc(_) => "fc",
            Layer::Add(_) => "add",
            Layer::Concat => "concat",
        }
    }

    fn config(&self) -> Result<Value> {
        Ok(match self {
            Layer::Conv(c) => serde_json::to_value(c)?,
            Layer::GhostModule(c) => serde_json::to_value(c)?,
            Layer::Se(c) => serde_json::to_value(c)?,
            Layer::Block(b) => serde_json::to_value(b)?["config"].take(),
            Layer::GGhostStage(c) => serde_json::to_value(c)?,
            Layer::MaxPool(c) => serde_json::to_value(c)?,
            Layer::Fc(c) => serde_json::to_value(c)?,
            Layer::Add(c) => serde_json::to_value(c)?,
            Layer::GlobalAvgPool | Layer::Concat => Value::Object(Default::default()),
        })
    }

    fn from_parts(node: &str, kind: &str, config: Value) -> Result<Layer> {
        let block = |tag: &str, config: Value| -> Result<Layer> {
            let tagged = serde_json::json!({ "kind": tag, "config": config });
            Ok(Layer::Block(serde_json::from_value(tagged)?))
        };
        let parsed = match kind {
            "conv" => serde_json::from_value(config).map(Layer::Conv),
            "ghost_module" => serde_json::from_value(config).map(Layer::GhostModule),
            "se" => serde_json::from_value(config).map(Layer::Se),
            "conv_block" => return block("conv", config),
            "basic_block" => return block("basic", config),
            "bottleneck" => return block("bottleneck", config),
            "expand_block" => return block("expand", config),
            "ghost_bottleneck" => return block("ghost_bottleneck", config),
            "gghost_stage" => serde_json::from_value(config).map(Layer::GGhostStage),
            "max_pool" => serde_json::from_value(config).map(Layer::MaxPool),
            "global_avg_pool" => Ok(Layer::GlobalAvgPool),
            "fc" => serde_json::from_value(config).map(Layer::Fc),
            "add" => serde_json::from_value(config).map(Layer::Add),
            "concat" => Ok(Layer::Concat),
            _ => {
                return Err(Error::UnknownKind {
                    node: node.to_string(),
                    kind: kind.to_string(),
                })
            }
        };
        parsed.map_err(|e| Error::graph(node, format!("bad `{kind}` config: {e}")))
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Layer::Add(_) => Some(2),
            Layer::Concat => None,
            _ => Some(1),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Layer::Conv(c) => c.spec().validate(),
            Layer::GhostModule(c) => c.validate(),
            Layer::Se(c) => c.validate(),
            Layer::Block(b) => b.validate(),
            Layer::GGhostStage(c) => c.validate(),
            Layer::MaxPool(p) if p.kernel == 0 || p.stride == 0 => {
                Err(Error::config("pool kernel and stride must be >= 1"))
            }
            Layer::Fc(f) if f.in_features == 0 || f.out_features == 0 => {
                Err(Error::config("fully connected layer needs >= 1 feature"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<String>,
}

/// A network as an ordered list of nodes. Inputs may name earlier nodes or
/// `input`, the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub name: String,
    /// (C, H, W)
    pub input_shape: [usize; 3],
    pub nodes: Vec<Node>,
}

#[derive(Serialize, Deserialize)]
struct RawNode {
    name: String,
    kind: String,
    #[serde(default)]
    config: Value,
    #[serde(default)]
    inputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawArch {
    name: String,
    input_shape: [usize; 3],
    nodes: Vec<RawNode>,
}

pub const INPUT_NAME: &str = "input";

impl ArchSpec {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3]) -> Self {
        ArchSpec {
            name: name.into(),
            input_shape,
            nodes: Vec::new(),
        }
    }

    /// Appends a node reading the previous node (or the input).
    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        let input = self
            .nodes
            .last()
            .map_or(INPUT_NAME.to_string(), |n| n.name.clone());
        self.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: vec![input],
        });
        self
    }

    pub fn input(&self, batch: usize) -> Shape {
        let [c, h, w] = self.input_shape;
        Shape::new(batch, c, h, w)
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.raw()?)?)
    }

    /// Single-line JSON, as embedded in checkpoints.
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.raw()?)?)
    }

    fn raw(&self) -> Result<RawArch> {
        Ok(RawArch {
            name: self.name.clone(),
            input_shape: self.input_shape,
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    Ok(RawNode {
                        name: n.name.clone(),
                        kind: n.layer.kind().to_string(),
                        config: n.layer.config()?,
                        inputs: n.inputs.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawArch = serde_json::from_str(text)?;
        let nodes = raw
            .nodes
            .into_iter()
            .map(|n| {
                let config = if n.config.is_null() {
                    Value::Object(Default::default())
                } else {
                    n.config
                };
                Ok(Node {
                    layer: Layer::from_parts(&n.name, &n.kind, config)?,
                    name: n.name,
                    inputs: n.inputs,
                })
            })
            .collect::<Result<_>>()?;
        let arch = ArchSpec {
            name: raw.name,
            input_shape: raw.input_shape,
            nodes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Checks names, references, arities, configs and the single-output rule.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        let mut consumed: HashSet<&str> = HashSet::new();
        for node in &self.nodes {
            if node.name == INPUT_NAME || node.name.is_empty() {
                return Err(Error::graph(&node.name, "reserved or empty node name"));
            }
            if let Some(k) = node.layer.arity() {
                if node.inputs.len() != k {
                    return Err(Error::graph(
                        &node.name,
                        format!(
                            "`{}` takes {k} input(s), got {}",
                            node.layer.kind(),
                            node.inputs.len()
                        ),
                    ));
                }
            } else if node.inputs.is_empty() {
                return Err(Error::graph(&node.name, "needs at least one input"));
            }
            for i in &node.inputs {
                if i != INPUT_NAME && !seen.contains(i.as_str()) {
                    return Err(Error::graph(
                        &node.name,
                        format!("input `{i}` is not an earlier node"),
                    ));
                }
                consumed.insert(i);
            }
            node.layer
                .validate()
                .map_err(|e| Error::graph(&node.name, e.to_string()))?;
            if !seen.insert(&node.name) {
                return Err(Error::graph(&node.name, "duplicate node name"));
            }
        }
        let outputs: Vec<&str> = self
            .nodes
            .iter()
            .map(|n| n.name.as_str())
            .filter(|n| !consumed.contains(n))
            .collect();
        if !self.nodes.is_empty() && outputs.len() != 1 {
            return Err(Error::graph(
                &self.name,
                format!("expected exactly one output node, found {outputs:?}"),
            ));
        }
        if let (Some(last), [out]) = (self.nodes.last(), outputs.as_slice()) {
            if last.name != *out {
                return Err(Error::graph(&last.name, "the output node must come last"));
            }
        }
        Ok(())
    }

    /// Names of the nodes that read `name`.
    pub fn consumers(&self, name: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == name))
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn lower(&self) -> Result<Program> {
        self.validate()?;
        let mut l = Lowerer::new();
        let mut regs: HashMap<&str, Reg> = HashMap::new();
        regs.insert(INPUT_NAME, INPUT);
        let mut out = INPUT;
        for node in &self.nodes {
            l.begin_node(&node.name);
            let ins: Vec<Reg> = node.inputs.iter().map(|i| regs[i.as_str()]).collect();
            let x = ins[0];
            let name = node.name.as_str();
            let y = match &node.layer {
                Layer::Conv(c) => {
                    if c.bn {
                        l.conv_bn(x, name, c.spec(), c.relu)
                    } else {
                        let y = l.conv(x, name, c.spec());
                        if c.relu {
                            l.relu(y)
                        } else {
                            y
                        }
                    }
                }
                Layer::GhostModule(c) => l.ghost_module(x, name, c),
                Layer::Se(c) => l.se(x, name, c),
                Layer::Block(b) => l.block(x, name, b),
                Layer::GGhostStage(c) => l.gghost_stage(x, name, c),
                Layer::MaxPool(p) => l.emit(Op::MaxPool(*p), vec![x]),
                Layer::GlobalAvgPool => l.emit(Op::GlobalAvgPool, vec![x]),
                Layer::Fc(f) => {
                    let mut y = l.fc(x, name, f.in_features, f.out_features, f.bias);
                    if f.bn {
                        y = l.batchnorm(y, &format!("{name}.bn"), f.out_features);
                    }
                    if f.relu {
                        y = l.relu(y);
                    }
                    y
                }
                Layer::Add(a) => {
                    let y = l.emit(Op::Add, ins.clone());
                    if a.relu {
                        l.relu(y)
                    } else {
                        y
                    }
                }
                Layer::Concat => l.emit(Op::Concat, ins.clone()),
            };
            l.tap(name, y);
            regs.insert(name, y);
            out = y;
        }
        Ok(l.finish(out))
    }

    /// Output shape of every node at batch size 1.
    pub fn shape_trace(&self) -> Result<Vec<(String, Shape)>> {
        let program = self.lower()?;
        let shapes = program.shapes(self.input(1))?;
        Ok(self
            .nodes
            .iter()
            .map(|n| (n.name.clone(), shapes[program.taps[&n.name]]))
            .collect())
    }

    pub fn output_shape(&self) -> Result<Shape> {
        let program = self.lower()?;
        Ok(program.shapes(self.input(1))?[program.output])
    }
}

/// An architecture together with its lowered program and weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: ArchSpec,
    pub program: Program,
    pub store: ParamStore,
}

impl Model {
    /// Fresh He-initialized weights drawn in node order from `seed`.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self> {
        let program = arch.lower()?;
        program.shapes(arch.input(1))?;
        let store = ParamStore::init(&program.decls, seed);
        Ok(Model {
            arch,
            program,
            store,
        })
    }

    pub fn with_store(arch: ArchSpec, store: ParamStore) -> Result<Self> {
        let program = arch.lower()?;
        store.check_against(&program.decls)?;
        Ok(Model {
            arch,
            program,
            store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ArchSpec {
        let mut a = ArchSpec::new("small", [3, 8, 8]);
        a.push("stem", Layer::Conv(ConvLayerConfig::standard(3, 8, 3, 1)))
            .push("pool", Layer::GlobalAvgPool)
            .push(
                "fc",
                Layer::Fc(FcConfig {
                    in_features: 8,
                    out_features: 4,
                    bias: true,
                    bn: false,
                    relu: false,
                }),
            );
        a
    }

    #[test]
    fn json_roundtrip() {
        let a = small();
        let text = a.to_json().unwrap();
        assert!(text.contains("\"input_shape\""));
        assert!(text.contains("\"kind\": \"conv\""));
        assert_eq!(ArchSpec::from_json(&text).unwrap(), a);
    }

    #[test]
    fn unknown_kind_names_the_node() {
        let text = r#"{"name":"x","input_shape":[1,4,4],"nodes":[
            {"name":"weird","kind":"transposed_conv","config":{},"inputs":["input"]}]}"#;
        match ArchSpec::from_json(text) {
            Err(Error::UnknownKind { node, kind }) => {
                assert_eq!(node, "weird");
                assert_eq!(kind, "transposed_conv");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_forward_references_and_two_outputs() {
        let mut a = small();
        a.nodes[0].inputs = vec!["fc".into()];
        assert!(matches!(a.validate(), Err(Error::Graph { .. })));
        let mut b = small();
        b.nodes[2].inputs = vec!["stem".into()];
        assert!(b.validate().is_err());
        let mut c = small();
        c.nodes[1].name = "stem".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_trace_and_model() {
        let a = small();
        let trace = a.shape_trace().unwrap();
        assert_eq!(trace[0].1, Shape::new(1, 8, 8, 8));
        assert_eq!(a.output_shape().unwrap(), Shape::new(1, 4, 1, 1));
        let m = Model::new(a.clone(), 1).unwrap();
        assert!(Model::with_store(a, m.store.clone()).is_ok());
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut a = small();
        a.input_shape = [2, 8, 8];
        match a.output_shape() {
            Err(Error::Graph { node, .. }) => assert_eq!(node, "stem"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
