//! Reference network builders.

use super::{ArchSpec, ConvLayerConfig, FcConfig, Layer};
use crate::blocks::{
    BasicBlockConfig, Block, BottleneckConfig, ConvBlockConfig, ExpandBlockConfig,
};
use crate::error::{Error, Result};
use crate::gghost::{CheapOp, GGhostStageConfig};
use crate::ghost::{round_channels, GhostBottleneckConfig};
use crate::tensor::PoolSpec;

/// Names accepted by [`build_named`].
pub const ZOO: [&str; 6] = [
    "c_ghostnet",
    "g_ghostnet",
    "vgg16_cifar",
    "resnet34",
    "resnet50",
    "resnet56",
];

/// Uniform channel scaling, rounded to the nearest multiple of 4 (min 4).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WidthMultiplier {
    alpha: f64,
}

impl WidthMultiplier {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!(
                "width multiplier must be > 0, got {alpha}"
            )));
        }
        Ok(WidthMultiplier { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn apply(&self, channels: usize) -> Result<usize> {
        let scaled = channels as f64 * self.alpha;
        if scaled < 2.0 {
            return Err(Error::config(format!(
                "width {channels} x {} rounds below 4 channels",
                self.alpha
            )));
        }
        Ok(round_channels(scaled))
    }
}

/// (#exp, #out, SE, stride) of each ghost bottleneck.
const C_GHOSTNET_ROWS: [(usize, usize, bool, usize); 16] = [
    (16, 16, false, 1),
    (48, 24, false, 2),
    (72, 24, false, 1),
    (72, 40, true, 2),
    (120, 40, true, 1),
    (240, 80, false, 2),
    (200, 80, false, 1),
    (184, 80, false, 1),
    (184, 80, false, 1),
    (480, 112, true, 1),
    (672, 112, true, 1),
    (672, 160, true, 2),
    (960, 160, false, 1),
    (960, 160, true, 1),
    (960, 160, false, 1),
    (960, 160, true, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CGhostNetOptions {
    pub width: f64,
    pub classes: usize,
    /// Square input side.
    pub input: usize,
    pub stem_stride: usize,
    /// Depthwise kernel of each bottleneck's strided path and shortcut.
    pub dw_kernels: [usize; 16],
}

impl Default for CGhostNetOptions {
    fn default() -> Self {
        CGhostNetOptions {
            width: 1.0,
            classes: 1000,
            input: 224,
            stem_stride: 2,
            dw_kernels: [3; 16],
        }
    }
}

impl CGhostNetOptions {
    /// 32×32 input, stride-1 stem.
    pub fn small(width: f64, classes: usize) -> Self {
        CGhostNetOptions {
            width,
            classes,
            input: 32,
            stem_stride: 1,
            ..Default::default()
        }
    }
}

fn head(arch: &mut ArchSpec, cin: usize, wm: WidthMultiplier, classes: usize) -> Result<()> {
    let hidden = wm.apply(960)?;
    arch.push(
        "head_conv",
        Layer::Conv(ConvLayerConfig::standard(cin, hidden, 1, 1)),
    )
    .push("pool", Layer::GlobalAvgPool)
    .push(
        "head_fc_conv",
        Layer::Conv(ConvLayerConfig {
            bias: true,
            bn: false,
            ..ConvLayerConfig::standard(hidden, 1280, 1, 1)
        }),
    )
    .push(
        "classifier",
        Layer::Fc(FcConfig {
            in_features: 1280,
            out_features: classes,
            bias: true,
            bn: false,
            relu: false,
        }),
    );
    Ok(())
}

pub fn build_c_ghostnet(alpha: f64) -> Result<ArchSpec> {
    build_c_ghostnet_with(&CGhostNetOptions {
        width: alpha,
        ..Default::default()
    })
}

pub fn build_c_ghostnet_with(opts: &CGhostNetOptions) -> Result<ArchSpec> {
    let wm = WidthMultiplier::new(opts.width)?;
    let mut arch = ArchSpec::new(
        format!("c_ghostnet_{}x", opts.width),
        [3, opts.input, opts.input],
    );
    let mut cin = wm.apply(16)?;
    arch.push(
        "stem",
        Layer::Conv(ConvLayerConfig::standard(3, cin, 3, opts.stem_stride)),
    );
    for (i, &(exp, out, se, stride)) in C_GHOSTNET_ROWS.iter().enumerate() {
        let out = wm.apply(out)?;
        let cfg = GhostBottleneckConfig {
            dw_kernel: opts.dw_kernels[i],
            ..GhostBottleneckConfig::new(cin, wm.apply(exp)?, out, stride, se)
        };
        arch.push(
            format!("bneck{}", i + 1),
            Layer::Block(Block::GhostBottleneck(cfg)),
        );
        cin = out;
    }
    head(&mut arch, cin, wm, opts.classes)?;
    Ok(arch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GGhostNetOptions {
    pub width: f64,
    pub lambda: f64,
    pub cheap: CheapOp,
    pub mix: bool,
    pub classes: usize,
    pub input: usize,
    pub stem_stride: usize,
}

impl Default for GGhostNetOptions {
    fn default() -> Self {
        GGhostNetOptions {
            width: 1.0,
            lambda: 0.4,
            cheap: CheapOp::Conv1x1,
            mix: true,
            classes: 1000,
            input: 224,
            stem_stride: 2,
        }
    }
}

pub fn build_g_ghostnet(alpha: f64) -> Result<ArchSpec> {
    build_g_ghostnet_with(&GGhostNetOptions {
        width: alpha,
        ..Default::default()
    })
}

/// With `lambda = 0` the stages are emitted as plain block nodes, giving the
/// unconverted backbone.
pub fn build_g_ghostnet_with(opts: &GGhostNetOptions) -> Result<ArchSpec> {
    let wm = WidthMultiplier::new(opts.width)?;
    let mut arch = ArchSpec::new(
        format!("g_ghostnet_{}x", opts.width),
        [3, opts.input, opts.input],
    );
    let mut cin = wm.apply(16)?;
    arch.push(
        "stem",
        Layer::Conv(ConvLayerConfig::standard(3, cin, 3, opts.stem_stride)),
    );
    for (s, &(out, n)) in [(24, 2), (40, 2), (80, 6), (160, 6)].iter().enumerate() {
        let out = wm.apply(out)?;
        let blocks: Vec<Block> = (0..n)
            .map(|i| {
                Block::Expand(ExpandBlockConfig {
                    in_channels: if i == 0 { cin } else { out },
                    out_channels: out,
                    expansion: 3,
                    stride: if i == 0 { 2 } else { 1 },
                    se: true,
                    ghost: None,
                })
            })
            .collect();
        if opts.lambda == 0.0 {
            for (i, b) in blocks.into_iter().enumerate() {
                arch.push(format!("stage{}_block{}", s + 1, i + 1), Layer::Block(b));
            }
        } else {
            let cfg = GGhostStageConfig::new(blocks, opts.lambda, opts.cheap, opts.mix);
            arch.push(format!("stage{}", s + 1), Layer::GGhostStage(cfg));
        }
        cin = out;
    }
    head(&mut arch, cin, wm, opts.classes)?;
    Ok(arch)
}

pub fn build_vgg16_cifar() -> ArchSpec {
    let mut arch = ArchSpec::new("vgg16_cifar", [3, 32, 32]);
    let groups: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256; 3], &[512; 3], &[512; 3]];
    let mut cin = 3;
    for (g, widths) in groups.iter().enumerate() {
        for (i, &w) in widths.iter().enumerate() {
            arch.push(
                format!("conv{}_{}", g + 1, i + 1),
                Layer::Conv(ConvLayerConfig::standard(cin, w, 3, 1)),
            );
            cin = w;
        }
        arch.push(
            format!("pool{}", g + 1),
            Layer::MaxPool(PoolSpec::new(2, 2, 0)),
        );
    }
    arch.push(
        "fc1",
        Layer::Fc(FcConfig {
            in_features: 512,
            out_features: 512,
            bias: true,
            bn: true,
            relu: true,
        }),
    )
    .push(
        "classifier",
        Layer::Fc(FcConfig {
            in_features: 512,
            out_features: 10,
            bias: true,
            bn: false,
            relu: false,
        }),
    );
    arch
}

fn classifier(arch: &mut ArchSpec, features: usize, classes: usize) {
    arch.push("pool", Layer::GlobalAvgPool).push(
        "classifier",
        Layer::Fc(FcConfig {
            in_features: features,
            out_features: classes,
            bias: true,
            bn: false,
            relu: false,
        }),
    );
}

/// ResNet-56 (CIFAR, 32×32) or ResNet-34/50 (ImageNet, 224×224).
pub fn build_resnet(depth: usize) -> Result<ArchSpec> {
    let mut arch;
    match depth {
        56 => {
            arch = ArchSpec::new("resnet56", [3, 32, 32]);
            arch.push("stem", Layer::Conv(ConvLayerConfig::standard(3, 16, 3, 1)));
            let mut cin = 16;
            for (s, &w) in [16, 32, 64].iter().enumerate() {
                for i in 0..9 {
                    let stride = if i == 0 && s > 0 { 2 } else { 1 };
                    let b = BasicBlockConfig {
                        in_channels: cin,
                        out_channels: w,
                        stride,
                        ghost: None,
                    };
                    arch.push(
                        format!("stage{}_block{}", s + 1, i + 1),
                        Layer::Block(Block::Basic(b)),
                    );
                    cin = w;
                }
            }
            classifier(&mut arch, 64, 10);
        }
        34 | 50 => {
            arch = ArchSpec::new(format!("resnet{depth}"), [3, 224, 224]);
            arch.push("stem", Layer::Conv(ConvLayerConfig::standard(3, 64, 7, 2)))
                .push("stem_pool", Layer::MaxPool(PoolSpec::new(3, 2, 1)));
            let mut cin = 64;
            let widths = if depth == 34 {
                [64, 128, 256, 512]
            } else {
                [256, 512, 1024, 2048]
            };
            for (s, (&w, n)) in widths.iter().zip([3, 4, 6, 3]).enumerate() {
                for i in 0..n {
                    let stride = if i == 0 && s > 0 { 2 } else { 1 };
                    let b = if depth == 34 {
                        Block::Basic(BasicBlockConfig {
                            in_channels: cin,
                            out_channels: w,
                            stride,
                            ghost: None,
                        })
                    } else {
                        Block::Bottleneck(BottleneckConfig {
                            in_channels: cin,
                            mid_channels: w / 4,
                            out_channels: w,
                            stride,
                            ghost: None,
                        })
                    };
                    arch.push(format!("stage{}_block{}", s + 1, i + 1), Layer::Block(b));
                    cin = w;
                }
            }
            classifier(&mut arch, cin, 1000);
        }
        _ => {
            return Err(Error::config(format!(
                "unsupported ResNet depth {depth} (expected 34, 50 or 56)"
            )))
        }
    }
    Ok(arch)
}

/// Builds a zoo network by name. `width` applies to the two ghost networks.
pub fn build_named(name: &str, width: f64) -> Result<ArchSpec> {
    match name {
        "c_ghostnet" => build_c_ghostnet(width),
        "g_ghostnet" => build_g_ghostnet(width),
        "vgg16_cifar" => Ok(build_vgg16_cifar()),
        "resnet34" => build_resnet(34),
        "resnet50" => build_resnet(50),
        "resnet56" => build_resnet(56),
        other => Err(Error::config(format!(
            "unknown architecture `{other}` (expected one of {})",
            ZOO.join(", ")
        ))),
    }
}

/// Overrides for [`build_named_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZooOptions {
    pub width: f64,
    /// Square input resolution; ghost networks switch to a stride-1 stem at 64 or below.
    pub input: Option<usize>,
    pub classes: Option<usize>,
}

impl Default for ZooOptions {
    fn default() -> Self {
        ZooOptions {
            width: 1.0,
            input: None,
            classes: None,
        }
    }
}

pub fn build_named_with(name: &str, opts: &ZooOptions) -> Result<ArchSpec> {
    let stem_stride = |input: usize| if input <= 64 { 1 } else { 2 };
    match name {
        "c_ghostnet" => {
            let mut o = CGhostNetOptions {
                width: opts.width,
                ..Default::default()
            };
            if let Some(input) = opts.input {
                o.input = input;
                o.stem_stride = stem_stride(input);
            }
            o.classes = opts.classes.unwrap_or(o.classes);
            build_c_ghostnet_with(&o)
        }
        "g_ghostnet" => {
            let mut o = GGhostNetOptions {
                width: opts.width,
                ..Default::default()
            };
            if let Some(input) = opts.input {
                o.input = input;
                o.stem_stride = stem_stride(input);
            }
            o.classes = opts.classes.unwrap_or(o.classes);
            build_g_ghostnet_with(&o)
        }
        _ => {
            let mut arch = build_named(name, opts.width)?;
            if let Some(input) = opts.input {
                arch.input_shape = [3, input, input];
            }
            if let Some(classes) = opts.classes {
                match arch.nodes.last_mut().map(|n| &mut n.layer) {
                    Some(Layer::Fc(fc)) => fc.out_features = classes,
                    _ => {
                        return Err(Error::config(format!(
                            "`{name}` has no classifier to resize"
                        )))
                    }
                }
            }
            arch.validate()?;
            Ok(arch)
        }
    }
}

/// Plain conv layers that stage detection may treat as blocks.
pub(crate) fn conv_as_block(c: &ConvLayerConfig) -> Option<Block> {
    let same_pad = c.padding.unwrap_or(c.kernel / 2) == c.kernel / 2;
    (c.bn && c.relu && c.groups == 1 && !c.bias && same_pad).then_some(Block::Conv(
        ConvBlockConfig {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            ghost: None,
        },
    ))
}
