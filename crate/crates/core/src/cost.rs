//! Parameter, FLOP and activation counting.
//!
//! One FLOP is one multiply-accumulate. Batch norm, activations, pooling and
//! element-wise ops count zero FLOPs; batch norm counts 2·c parameters.
//! Activations are the summed output sizes of every convolution.

use std::fmt::Write as _;

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::program::InstrCost;
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    pub activations: u64,
    pub out_shape: Shape,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub params: u64,
    pub flops: u64,
    pub activations: u64,
}

impl CostReport {
    /// Row for a node, if present.
    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let shape = |s: &Shape| format!("{}x{}x{}", s.c, s.h, s.w);
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain([5])
            .max()
            .unwrap_or(5);
        let kind_w = self
            .rows
            .iter()
            .map(|r| r.kind.len())
            .chain([4])
            .max()
            .unwrap_or(4);
        let mut out = String::new();
        let _ = writeln!(out, "# FLOPs counted as multiply-accumulates (MACs)");
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:>12}  {:>15}  {:>12}  out_shape",
            "name", "kind", "params", "flops", "activations"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:<kind_w$}  {:>12}  {:>15}  {:>12}  {}",
                r.name,
                r.kind,
                r.params,
                r.flops,
                r.activations,
                shape(&r.out_shape)
            );
        }
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<kind_w$}  {:>12}  {:>15}  {:>12}",
            "total", "", self.params, self.flops, self.activations
        );
        let _ = writeln!(
            out,
            "params {:.3}M  flops {:.1}M  activations {:.3}M",
            self.params as f64 / 1e6,
            self.flops as f64 / 1e6,
            self.activations as f64 / 1e6
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,params,flops,activations,out_shape\n");
        for r in &self.rows {
            let s = r.out_shape;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}x{}x{}",
                r.name, r.kind, r.params, r.flops, r.activations, s.c, s.h, s.w
            );
        }
        let _ = writeln!(
            out,
            "total,,{},{},{},",
            self.params, self.flops, self.activations
        );
        out
    }
}

/// Counts costs per node at batch size 1. `input` overrides the arch's
/// declared `[C, H, W]`.
pub fn count_costs(arch: &ArchSpec, input: Option<[usize; 3]>) -> Result<CostReport> {
    let mut arch = arch.clone();
    if let Some(shape) = input {
        arch.input_shape = shape;
    }
    if arch.nodes.is_empty() {
        return Ok(CostReport::default());
    }
    let program = arch.lower()?;
    let shapes = program.shapes(arch.input(1))?;
    let costs = program.costs(arch.input(1))?;
    let mut per_node = vec![InstrCost::default(); program.nodes.len()];
    for (instr, c) in program.instrs.iter().zip(&costs) {
        let slot = &mut per_node[instr.node];
        slot.params += c.params;
        slot.flops += c.flops;
        slot.activations += c.activations;
    }
    let mut report = CostReport::default();
    for node in &arch.nodes {
        let idx = program
            .nodes
            .iter()
            .position(|n| n == &node.name)
            .ok_or_else(|| Error::graph(&node.name, "node was not lowered"))?;
        let c = per_node[idx];
        report.params += c.params;
        report.flops += c.flops;
        report.activations += c.activations;
        report.rows.push(CostRow {
            name: node.name.clone(),
            kind: node.layer.kind().to_string(),
            params: c.params,
            flops: c.flops,
            activations: c.activations,
            out_shape: shapes[program.taps[&node.name]],
        });
    }
    Ok(report)
}

fn check_positive(pairs: &[(&str, usize)]) -> Result<()> {
    match pairs.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::config(format!("{name} must be >= 1"))),
        None => Ok(()),
    }
}

/// Speed-up of a ghost module over an ordinary convolution with `c` input
/// channels, kernel `k`, cheap kernel `d` and ratio `s`, before approximation.
pub fn speedup_ratio_rs(c: usize, k: usize, d: usize, s: usize) -> Result<f64> {
    check_positive(&[("c", c), ("k", k), ("d", d), ("s", s)])?;
    let (c, k, d, s) = (c as f64, k as f64, d as f64, s as f64);
    let full = c * k * k;
    Ok(full / (full / s + (s - 1.0) / s * d * d))
}

/// Parameter compression of a ghost module producing `n` maps.
pub fn compression_ratio_rc(c: usize, k: usize, d: usize, s: usize, n: usize) -> Result<f64> {
    check_positive(&[("c", c), ("k", k), ("d", d), ("s", s), ("n", n)])?;
    let (c, k, d, s, n) = (c as f64, k as f64, d as f64, s as f64, n as f64);
    let m = n / s;
    Ok(n * c * k * k / (m * c * k * k + (s - 1.0) * m * d * d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ConvLayerConfig, Layer};

    #[test]
    fn single_conv() {
        let mut a = ArchSpec::new("one", [3, 32, 32]);
        let mut conv = ConvLayerConfig::standard(3, 16, 3, 1);
        conv.bn = false;
        conv.relu = false;
        a.push("conv", Layer::Conv(conv));
        let r = count_costs(&a, None).unwrap();
        assert_eq!(r.flops, 16 * 32 * 32 * 3 * 9);
        assert_eq!(r.params, 432);
        assert_eq!(r.activations, 16 * 32 * 32);
        conv.bias = true;
        a.nodes[0].layer = Layer::Conv(conv);
        assert_eq!(count_costs(&a, None).unwrap().params, 448);
    }

    #[test]
    fn empty_arch_is_zero() {
        let r = count_costs(&ArchSpec::new("e", [3, 8, 8]), None).unwrap();
        assert_eq!((r.params, r.flops, r.activations), (0, 0, 0));
    }

    #[test]
    fn closed_forms() {
        let rs = speedup_ratio_rs(256, 3, 3, 2).unwrap();
        assert!((rs - 2304.0 / 1156.5).abs() < 1e-12);
        assert_eq!(speedup_ratio_rs(64, 3, 3, 1).unwrap(), 1.0);
        assert_eq!(compression_ratio_rc(64, 3, 3, 1, 32).unwrap(), 1.0);
        assert!(speedup_ratio_rs(0, 3, 3, 2).is_err());
    }

    #[test]
    fn csv_has_header_and_total() {
        let mut a = ArchSpec::new("one", [3, 8, 8]);
        a.push("conv", Layer::Conv(ConvLayerConfig::standard(3, 4, 3, 1)));
        let csv = count_costs(&a, None).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,kind,params,flops,activations,out_shape");
        assert_eq!(lines[1], "conv,conv,116,6912,256,4x8x8");
        assert!(lines[2].starts_with("total,"));
    }
}
