//! Ghost module, squeeze-and-excite and the ghost bottleneck.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::params::ParamStore;
use crate::program::{Lowerer, Op, Program, Reg, INPUT};
use crate::tensor::{ConvSpec, Tensor};

/// Nearest multiple of 4, at least 4, and never below 90% of `v`.
pub fn round_channels(v: f64) -> usize {
    let mut n = (((v + 2.0) as usize) / 4 * 4).max(4);
    if (n as f64) < 0.9 * v {
        n += 4;
    }
    n
}

fn default_ratio() -> usize {
    2
}

fn default_cheap_kernel() -> usize {
    3
}

/// Primary convolution producing ceil(n/s) intrinsic maps, followed by a
/// depthwise d×d convolution producing the remaining ghost maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostModuleConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    pub kernel: usize,
    #[serde(default = "default_cheap_kernel")]
    pub cheap_kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub relu: bool,
}

fn one() -> usize {
    1
}

impl GhostModuleConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        GhostModuleConfig {
            in_channels,
            out_channels,
            ratio: 2,
            kernel,
            cheap_kernel: 3,
            stride,
            relu: true,
        }
    }

    pub fn with_ratio(mut self, ratio: usize, cheap_kernel: usize) -> Self {
        self.ratio = ratio;
        self.cheap_kernel = cheap_kernel;
        self
    }

    pub fn with_relu(mut self, relu: bool) -> Self {
        self.relu = relu;
        self
    }

    /// Number of maps from the primary convolution.
    pub fn intrinsic(&self) -> usize {
        self.out_channels.div_ceil(self.ratio.max(1))
    }

    /// Number of maps from the cheap branch, before truncation to n.
    pub fn ghost(&self) -> usize {
        self.intrinsic() * (self.ratio.max(1) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels < 1 {
            return Err(Error::config(
                "ghost module needs at least one output channel",
            ));
        }
        if self.ratio < 1 {
            return Err(Error::config("ghost ratio s must be >= 1"));
        }
        if self.in_channels < 1 || self.kernel < 1 || self.stride < 1 {
            return Err(Error::config(
                "ghost module channels, kernel and stride must be >= 1",
            ));
        }
        if self.cheap_kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "cheap kernel must be odd, got {}",
                self.cheap_kernel
            )));
        }
        Ok(())
    }

    pub fn primary_spec(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.intrinsic(), self.kernel, self.stride)
    }

    pub fn cheap_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.intrinsic(), self.ratio - 1, self.cheap_kernel, 1)
    }

    pub fn program(&self) -> Result<Program> {
        self.validate()?;
        Ok(standalone("ghost", |l, x| l.ghost_module(x, "ghost", self)))
    }
}

/// Channel gating with a hard-sigmoid gate clamp((t + 3) / 6, 0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SEConfig {
    pub channels: usize,
    #[serde(default = "four")]
    pub reduction: usize,
}

fn four() -> usize {
    4
}

impl SEConfig {
    pub fn new(channels: usize) -> Self {
        SEConfig {
            channels,
            reduction: 4,
        }
    }

    pub fn reduced(&self) -> usize {
        round_channels(self.channels as f64 / self.reduction as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction < 1 || self.channels < self.reduction {
            return Err(Error::config(format!(
                "SE needs channels / reduction >= 1, got {} / {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    pub fn program(&self) -> Result<Program> {
        self.validate()?;
        Ok(standalone("se", |l, x| l.se(x, "se", self)))
    }
}

/// Two stacked ghost modules with an optional strided depthwise conv and SE between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostBottleneckConfig {
    pub in_channels: usize,
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub se: bool,
    #[serde(default = "default_cheap_kernel")]
    pub dw_kernel: usize,
    #[serde(default = "default_ratio")]
    pub ratio: usize,
    #[serde(default = "default_cheap_kernel")]
    pub cheap_kernel: usize,
}

impl GhostBottleneckConfig {
    pub fn new(
        in_channels: usize,
        expansion: usize,
        out_channels: usize,
        stride: usize,
        se: bool,
    ) -> Self {
        GhostBottleneckConfig {
            in_channels,
            expansion,
            out_channels,
            stride,
            se,
            dw_kernel: 3,
            ratio: 2,
            cheap_kernel: 3,
        }
    }

    pub fn identity_shortcut(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::config(format!(
                "bottleneck stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::config("depthwise kernel must be odd"));
        }
        self.first().validate()?;
        self.second().validate()?;
        if self.se {
            SEConfig::new(self.expansion).validate()?;
        }
        Ok(())
    }

    fn first(&self) -> GhostModuleConfig {
        GhostModuleConfig::new(self.in_channels, self.expansion, 1, 1)
            .with_ratio(self.ratio, self.cheap_kernel)
    }

    fn second(&self) -> GhostModuleConfig {
        GhostModuleConfig::new(self.expansion, self.out_channels, 1, 1)
            .with_ratio(self.ratio, self.cheap_kernel)
            .with_relu(false)
    }

    pub fn program(&self) -> Result<Program> {
        self.validate()?;
        Ok(standalone("bneck", |l, x| {
            l.ghost_bottleneck(x, "bneck", self)
        }))
    }
}

/// Lowers a single-node program reading the network input.
pub(crate) fn standalone(name: &str, f: impl FnOnce(&mut Lowerer, Reg) -> Reg) -> Program {
    let mut l = Lowerer::new();
    l.begin_node(name);
    let y = f(&mut l, INPUT);
    l.tap(name, y);
    l.finish(y)
}

impl Lowerer {
    pub fn ghost_module(&mut self, x: Reg, name: &str, cfg: &GhostModuleConfig) -> Reg {
        let primary = self.conv_bn(x, &format!("{name}.primary"), cfg.primary_spec(), cfg.relu);
        if cfg.ratio == 1 {
            return primary;
        }
        let ghost = self.conv_bn(
            primary,
            &format!("{name}.cheap"),
            cfg.cheap_spec(),
            cfg.relu,
        );
        let both = self.emit(Op::Concat, vec![primary, ghost]);
        if cfg.intrinsic() + cfg.ghost() > cfg.out_channels {
            self.emit(
                Op::Slice {
                    start: 0,
                    len: cfg.out_channels,
                },
                vec![both],
            )
        } else {
            both
        }
    }

    pub fn se(&mut self, x: Reg, name: &str, cfg: &SEConfig) -> Reg {
        let c = cfg.channels;
        let r = cfg.reduced();
        let pooled = self.emit(Op::GlobalAvgPool, vec![x]);
        let h = self.fc(pooled, &format!("{name}.reduce"), c, r, true);
        let h = self.relu(h);
        let t = self.fc(h, &format!("{name}.expand"), r, c, true);
        let gate = self.emit(Op::HardSigmoid, vec![t]);
        self.emit(Op::Scale, vec![x, gate])
    }

    pub fn ghost_bottleneck(&mut self, x: Reg, name: &str, cfg: &GhostBottleneckConfig) -> Reg {
        let mut h = self.ghost_module(x, &format!("{name}.ghost1"), &cfg.first());
        if cfg.stride > 1 {
            let dw = ConvSpec::depthwise(cfg.expansion, 1, cfg.dw_kernel, cfg.stride);
            h = self.conv_bn(h, &format!("{name}.dw"), dw, false);
        }
        if cfg.se {
            h = self.se(h, &format!("{name}.se"), &SEConfig::new(cfg.expansion));
        }
        h = self.ghost_module(h, &format!("{name}.ghost2"), &cfg.second());
        let shortcut = if cfg.identity_shortcut() {
            x
        } else {
            let dw = ConvSpec::depthwise(cfg.in_channels, 1, cfg.dw_kernel, cfg.stride);
            let s = self.conv_bn(x, &format!("{name}.shortcut_dw"), dw, false);
            let pw = ConvSpec::new(cfg.in_channels, cfg.out_channels, 1, 1);
            self.conv_bn(s, &format!("{name}.shortcut_pw"), pw, false)
        };
        self.emit(Op::Add, vec![h, shortcut])
    }
}

fn run(program: &Program, x: &Tensor, store: &ParamStore) -> Result<Tensor> {
    let trace = program.forward(x, store, false)?;
    Ok(trace.values[program.output].clone())
}

/// Inference-mode forward of one ghost module. Weights are named as in
/// [`GhostModuleConfig::program`].
pub fn ghost_module_forward(
    x: &Tensor,
    cfg: &GhostModuleConfig,
    weights: &ParamStore,
) -> Result<Tensor> {
    check_dim("ghost_module", "C", cfg.in_channels, x.shape().c)?;
    run(&cfg.program()?, x, weights)
}

pub fn se_forward(x: &Tensor, cfg: &SEConfig, weights: &ParamStore) -> Result<Tensor> {
    check_dim("se", "C", cfg.channels, x.shape().c)?;
    run(&cfg.program()?, x, weights)
}

pub fn ghost_bottleneck_forward(
    x: &Tensor,
    cfg: &GhostBottleneckConfig,
    weights: &ParamStore,
) -> Result<Tensor> {
    check_dim("ghost_bottleneck", "C", cfg.in_channels, x.shape().c)?;
    run(&cfg.program()?, x, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Scalar, Shape};

    #[test]
    fn channel_rounding() {
        assert_eq!(round_channels(16.0), 16);
        assert_eq!(round_channels(1.0), 4);
        assert_eq!(round_channels(18.0), 20);
        assert_eq!(round_channels(17.0), 16);
        assert_eq!(round_channels(17.9), 20);
        assert_eq!(round_channels(5.9), 8);
        assert_eq!(round_channels(240.0 * 0.5), 120);
    }

    #[test]
    fn ceil_and_truncate() {
        let cfg = GhostModuleConfig::new(3, 5, 1, 1);
        assert_eq!((cfg.intrinsic(), cfg.ghost()), (3, 3));
        let p = cfg.program().unwrap();
        let shapes = p.shapes(Shape::new(2, 3, 4, 4)).unwrap();
        assert_eq!(shapes[p.output], Shape::new(2, 5, 4, 4));
    }

    #[test]
    fn invalid_module() {
        let mut cfg = GhostModuleConfig::new(3, 0, 1, 1);
        assert!(cfg.validate().is_err());
        cfg.out_channels = 4;
        cfg.ratio = 0;
        assert!(cfg.validate().is_err());
        cfg.ratio = 2;
        cfg.cheap_kernel = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_cheap_duplicates_intrinsic_maps() {
        let cfg = GhostModuleConfig::new(2, 4, 1, 1).with_relu(false);
        let p = cfg.program().unwrap();
        let mut store = ParamStore::init(&p.decls, 3);
        let mut centre = vec![0.0; 9];
        centre[4] = 1.0;
        store
            .set("ghost.cheap.weight", [centre.clone(), centre].concat())
            .unwrap();
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |i| (i as Scalar * 0.7).sin());
        let y = ghost_module_forward(&x, &cfg, &store).unwrap();
        let scale = 1.0 / (1.0 + crate::tensor::BN_EPS).sqrt();
        for c in 0..2 {
            for (a, b) in y.plane(0, c + 2).iter().zip(y.plane(0, c)) {
                assert!((a - b * scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_se_gates() {
        let cfg = SEConfig::new(4);
        let p = cfg.program().unwrap();
        let mut store = ParamStore::init(&p.decls, 1);
        let x = Tensor::from_fn(Shape::new(2, 4, 2, 2), |i| i as Scalar - 5.0);
        store.set("se.expand.weight", vec![0.0; 16]).unwrap();
        store.set("se.expand.bias", vec![3.0; 4]).unwrap();
        assert_eq!(se_forward(&x, &cfg, &store).unwrap(), x);
        store.set("se.expand.bias", vec![-3.0; 4]).unwrap();
        assert!(se_forward(&x, &cfg, &store)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residual_keeps_input() {
        let cfg = GhostBottleneckConfig::new(16, 32, 16, 1, true);
        let p = cfg.program().unwrap();
        let mut store = ParamStore::init(&p.decls, 1);
        let names: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.ends_with("weight"))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let len = store.get(&n).unwrap().len();
            store.set(&n, vec![0.0; len]).unwrap();
        }
        let x = Tensor::from_fn(Shape::new(1, 16, 4, 4), |i| (i as Scalar).cos());
        assert_eq!(ghost_bottleneck_forward(&x, &cfg, &store).unwrap(), x);
    }

    #[test]
    fn stride_two_bottleneck_shape() {
        let cfg = GhostBottleneckConfig::new(16, 48, 24, 2, false);
        let p = cfg.program().unwrap();
        let shapes = p.shapes(Shape::new(1, 16, 112, 112)).unwrap();
        assert_eq!(shapes[p.output], Shape::new(1, 24, 56, 56));
        assert!(GhostBottleneckConfig::new(16, 48, 24, 3, false)
            .validate()
            .is_err());
    }
}
