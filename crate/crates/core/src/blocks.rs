//! Residual and plain blocks that stages are built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ghost::{GhostBottleneckConfig, GhostModuleConfig, SEConfig};
use crate::program::{Lowerer, Op, Reg};
use crate::tensor::ConvSpec;

/// Replaces a block's ordinary convolutions with ghost modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostOpts {
    pub ratio: usize,
    pub cheap_kernel: usize,
}

/// conv → BN → ReLU, the layer of plain networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghost: Option<GhostOpts>,
}

/// Two 3×3 convs with a shortcut (1×1 projection when the shape changes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghost: Option<GhostOpts>,
}

/// 1×1 reduce, 3×3 (strided), 1×1 expand, with a shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghost: Option<GhostOpts>,
}

/// 1×1 expand by `expansion`, ordinary 3×3 (strided), optional SE, 1×1
/// project; residual add when shapes match, then ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: usize,
    pub stride: usize,
    pub se: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ghost: Option<GhostOpts>,
}

impl ExpandBlockConfig {
    pub fn hidden(&self) -> usize {
        self.in_channels * self.expansion
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum Block {
    Conv(ConvBlockConfig),
    Basic(BasicBlockConfig),
    Bottleneck(BottleneckConfig),
    Expand(ExpandBlockConfig),
    GhostBottleneck(GhostBottleneckConfig),
}

fn scaled(v: usize, num: usize, den: usize) -> usize {
    ((v * num) as f64 / den as f64).round().max(1.0) as usize
}

impl Block {
    pub fn in_channels(&self) -> usize {
        match self {
            Block::Conv(b) => b.in_channels,
            Block::Basic(b) => b.in_channels,
            Block::Bottleneck(b) => b.in_channels,
            Block::Expand(b) => b.in_channels,
            Block::GhostBottleneck(b) => b.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Block::Conv(b) => b.out_channels,
            Block::Basic(b) => b.out_channels,
            Block::Bottleneck(b) => b.out_channels,
            Block::Expand(b) => b.out_channels,
            Block::GhostBottleneck(b) => b.out_channels,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Block::Conv(b) => b.stride,
            Block::Basic(b) => b.stride,
            Block::Bottleneck(b) => b.stride,
            Block::Expand(b) => b.stride,
            Block::GhostBottleneck(b) => b.stride,
        }
    }

    /// Whether the block carries a skip connection.
    pub fn is_residual(&self) -> bool {
        !matches!(self, Block::Conv(_))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels() < 1 || self.out_channels() < 1 || self.stride() < 1 {
            return Err(Error::config("block channels and stride must be >= 1"));
        }
        match self {
            Block::Conv(b) if b.kernel < 1 => Err(Error::config("conv kernel must be >= 1")),
            Block::Bottleneck(b) if b.mid_channels < 1 => {
                Err(Error::config("bottleneck width must be >= 1"))
            }
            Block::Expand(b) if b.expansion < 1 => Err(Error::config("expansion must be >= 1")),
            Block::Expand(b) if b.se => SEConfig::new(b.hidden()).validate(),
            Block::GhostBottleneck(b) => b.validate(),
            _ => Ok(()),
        }
    }

    /// The same block at width `width` in and out, stride 1, with internal
    /// widths scaled by `width / full`.
    pub fn thin(&self, width: usize, full: usize) -> Block {
        match *self {
            Block::Conv(b) => Block::Conv(ConvBlockConfig {
                in_channels: width,
                out_channels: width,
                stride: 1,
                ..b
            }),
            Block::Basic(b) => Block::Basic(BasicBlockConfig {
                in_channels: width,
                out_channels: width,
                stride: 1,
                ..b
            }),
            Block::Bottleneck(b) => Block::Bottleneck(BottleneckConfig {
                in_channels: width,
                mid_channels: scaled(b.mid_channels, width, full),
                out_channels: width,
                stride: 1,
                ..b
            }),
            Block::Expand(b) => Block::Expand(ExpandBlockConfig {
                in_channels: width,
                out_channels: width,
                stride: 1,
                ..b
            }),
            Block::GhostBottleneck(b) => Block::GhostBottleneck(GhostBottleneckConfig {
                in_channels: width,
                expansion: scaled(b.expansion, width, full),
                out_channels: width,
                stride: 1,
                ..b
            }),
        }
    }

    /// Sets ghost options on every ordinary convolution. Ghost bottlenecks
    /// are unchanged.
    pub fn with_ghost(&self, opts: GhostOpts) -> Block {
        let g = Some(opts);
        match *self {
            Block::Conv(b) => Block::Conv(ConvBlockConfig { ghost: g, ..b }),
            Block::Basic(b) => Block::Basic(BasicBlockConfig { ghost: g, ..b }),
            Block::Bottleneck(b) => Block::Bottleneck(BottleneckConfig { ghost: g, ..b }),
            Block::Expand(b) => Block::Expand(ExpandBlockConfig { ghost: g, ..b }),
            Block::GhostBottleneck(b) => Block::GhostBottleneck(b),
        }
    }
}

impl Lowerer {
    /// Ordinary k×k conv + BN (+ReLU), or a ghost module of the same shape.
    pub fn unit(
        &mut self,
        x: Reg,
        name: &str,
        spec: ConvSpec,
        ghost: Option<GhostOpts>,
        relu: bool,
    ) -> Reg {
        match ghost {
            Some(g) if g.ratio > 1 && spec.groups == 1 => {
                let cfg = GhostModuleConfig {
                    in_channels: spec.in_channels,
                    out_channels: spec.out_channels,
                    ratio: g.ratio,
                    kernel: spec.kernel,
                    cheap_kernel: g.cheap_kernel,
                    stride: spec.stride,
                    relu,
                };
                self.ghost_module(x, name, &cfg)
            }
            _ => self.conv_bn(x, name, spec, relu),
        }
    }

    fn shortcut(
        &mut self,
        x: Reg,
        name: &str,
        (cin, cout, stride): (usize, usize, usize),
        ghost: Option<GhostOpts>,
    ) -> Reg {
        if stride == 1 && cin == cout {
            x
        } else {
            let spec = ConvSpec::new(cin, cout, 1, stride);
            self.unit(x, &format!("{name}.shortcut"), spec, ghost, false)
        }
    }

    pub fn block(&mut self, x: Reg, name: &str, block: &Block) -> Reg {
        match block {
            Block::Conv(b) => {
                let spec = ConvSpec::new(b.in_channels, b.out_channels, b.kernel, b.stride);
                self.unit(x, name, spec, b.ghost, true)
            }
            Block::Basic(b) => {
                let (cin, cout) = (b.in_channels, b.out_channels);
                let h = self.unit(
                    x,
                    &format!("{name}.conv1"),
                    ConvSpec::new(cin, cout, 3, b.stride),
                    b.ghost,
                    true,
                );
                let h = self.unit(
                    h,
                    &format!("{name}.conv2"),
                    ConvSpec::new(cout, cout, 3, 1),
                    b.ghost,
                    false,
                );
                let s = self.shortcut(x, name, (cin, cout, b.stride), b.ghost);
                let y = self.emit(Op::Add, vec![h, s]);
                self.relu(y)
            }
            Block::Bottleneck(b) => {
                let (cin, mid, cout) = (b.in_channels, b.mid_channels, b.out_channels);
                let h = self.unit(
                    x,
                    &format!("{name}.conv1"),
                    ConvSpec::new(cin, mid, 1, 1),
                    b.ghost,
                    true,
                );
                let h = self.unit(
                    h,
                    &format!("{name}.conv2"),
                    ConvSpec::new(mid, mid, 3, b.stride),
                    b.ghost,
                    true,
                );
                let h = self.unit(
                    h,
                    &format!("{name}.conv3"),
                    ConvSpec::new(mid, cout, 1, 1),
                    b.ghost,
                    false,
                );
                let s = self.shortcut(x, name, (cin, cout, b.stride), b.ghost);
                let y = self.emit(Op::Add, vec![h, s]);
                self.relu(y)
            }
            Block::Expand(b) => {
                let (cin, hid, cout) = (b.in_channels, b.hidden(), b.out_channels);
                let mut h = self.unit(
                    x,
                    &format!("{name}.expand"),
                    ConvSpec::new(cin, hid, 1, 1),
                    b.ghost,
                    true,
                );
                h = self.unit(
                    h,
                    &format!("{name}.conv"),
                    ConvSpec::new(hid, hid, 3, b.stride),
                    b.ghost,
                    true,
                );
                if b.se {
                    h = self.se(h, &format!("{name}.se"), &SEConfig::new(hid));
                }
                h = self.unit(
                    h,
                    &format!("{name}.project"),
                    ConvSpec::new(hid, cout, 1, 1),
                    b.ghost,
                    false,
                );
                if b.stride == 1 && cin == cout {
                    h = self.emit(Op::Add, vec![h, x]);
                }
                self.relu(h)
            }
            Block::GhostBottleneck(b) => self.ghost_bottleneck(x, name, b),
        }
    }
}
