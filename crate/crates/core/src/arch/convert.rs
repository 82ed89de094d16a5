//! Whole-network conversion passes.

use super::zoo::conv_as_block;
use super::{ArchSpec, Layer, Node};
use crate::blocks::{Block, GhostOpts};
use crate::error::{Error, Result};
use crate::gghost::{CheapOp, GGhostStageConfig};
use crate::ghost::GhostModuleConfig;

/// Replaces every ordinary (dense, batch-normalized, bias-free) convolution
/// with a ghost module of the same output width, kernel and stride. Depthwise
/// and bias-only convolutions and fully connected layers are kept.
pub fn c_ghostify(arch: &ArchSpec, ratio: usize, cheap_kernel: usize) -> Result<ArchSpec> {
    if ratio < 1 {
        return Err(Error::config("ghost ratio s must be >= 1"));
    }
    if cheap_kernel.is_multiple_of(2) {
        return Err(Error::config(format!(
            "cheap kernel d must be odd, got {cheap_kernel}"
        )));
    }
    let mut out = arch.clone();
    if ratio == 1 {
        return Ok(out);
    }
    let opts = GhostOpts {
        ratio,
        cheap_kernel,
    };
    for node in &mut out.nodes {
        node.layer = match &node.layer {
            Layer::Conv(c)
                if c.bn
                    && c.groups == 1
                    && !c.bias
                    && c.padding.unwrap_or(c.kernel / 2) == c.kernel / 2 =>
            {
                Layer::GhostModule(GhostModuleConfig {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    ratio,
                    kernel: c.kernel,
                    cheap_kernel,
                    stride: c.stride,
                    relu: c.relu,
                })
            }
            Layer::Block(b) => Layer::Block(b.with_ghost(opts)),
            Layer::GGhostStage(s) => Layer::GGhostStage(GGhostStageConfig {
                blocks: s.blocks.iter().map(|b| b.with_ghost(opts)).collect(),
                ..s.clone()
            }),
            other => other.clone(),
        };
    }
    out.validate()?;
    Ok(out)
}

/// The block a node counts as for stage detection. Residual networks count
/// only their residual blocks; plain networks count conv → BN → ReLU layers.
pub fn stage_block(node: &Node, residual_net: bool) -> Option<Block> {
    match &node.layer {
        Layer::Block(b) if b.is_residual() == residual_net => Some(*b),
        Layer::Conv(c) if !residual_net => conv_as_block(c),
        _ => None,
    }
}

/// Maximal runs of chained blocks at one width and resolution, as node
/// indices. A run starts at a block that changes stride or width.
pub fn detect_stages(arch: &ArchSpec) -> Result<Vec<Vec<usize>>> {
    let residual = arch
        .nodes
        .iter()
        .any(|n| matches!(&n.layer, Layer::Block(b) if b.is_residual()));
    let mut stages: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for (i, node) in arch.nodes.iter().enumerate() {
        let Some(block) = stage_block(node, residual) else {
            if !current.is_empty() {
                stages.push(std::mem::take(&mut current));
            }
            continue;
        };
        let extends = current.last().is_some_and(|&prev| {
            let p = &arch.nodes[prev];
            let width = stage_block(p, residual).map_or(0, |b| b.out_channels());
            node.inputs == [p.name.clone()]
                && arch.consumers(&p.name).len() == 1
                && block.stride() == 1
                && block.in_channels() == width
                && block.out_channels() == width
        });
        if !extends && !current.is_empty() {
            stages.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        stages.push(current);
    }
    if stages.is_empty() {
        return Err(Error::graph(
            &arch.name,
            "no stages found: the network has no blocks",
        ));
    }
    Ok(stages)
}

/// Replaces every stage of two or more blocks with a G-Ghost stage that keeps
/// the stage's input/output widths and stride. Residual stages of three or
/// more blocks keep their last block at full width after the concat.
pub fn g_ghostify(arch: &ArchSpec, lambda: f64, cheap: CheapOp, mix: bool) -> Result<ArchSpec> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::config(format!(
            "ghost ratio λ must be in [0, 1), got {lambda}"
        )));
    }
    let stages = detect_stages(arch)?;
    let residual = arch
        .nodes
        .iter()
        .any(|n| matches!(&n.layer, Layer::Block(b) if b.is_residual()));
    let mut replace: Vec<Option<Node>> = vec![None; arch.nodes.len()];
    let mut drop = vec![false; arch.nodes.len()];
    for run in stages.iter().filter(|r| r.len() >= 2) {
        let blocks: Vec<Block> = run
            .iter()
            .map(|&i| stage_block(&arch.nodes[i], residual).expect("detected blocks"))
            .collect();
        let n = blocks.len();
        let cfg = GGhostStageConfig {
            tail: residual && n >= 3,
            ..GGhostStageConfig::new(blocks, lambda, cheap, mix)
        };
        if !cfg.is_split() {
            continue;
        }
        let last = &arch.nodes[*run.last().expect("non-empty run")];
        cfg.validate()
            .map_err(|e| Error::graph(&last.name, e.to_string()))?;
        for &i in run {
            drop[i] = true;
        }
        replace[run[0]] = Some(Node {
            name: last.name.clone(),
            layer: Layer::GGhostStage(cfg),
            inputs: arch.nodes[run[0]].inputs.clone(),
        });
    }
    let mut out = ArchSpec {
        name: format!("{}_gghost", arch.name),
        input_shape: arch.input_shape,
        nodes: Vec::with_capacity(arch.nodes.len()),
    };
    for (i, node) in arch.nodes.iter().enumerate() {
        if let Some(stage) = replace[i].take() {
            out.nodes.push(stage);
        } else if !drop[i] {
            out.nodes.push(node.clone());
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_resnet, build_vgg16_cifar};

    #[test]
    fn resnet56_stages() {
        let r = build_resnet(56).unwrap();
        let stages = detect_stages(&r).unwrap();
        assert_eq!(
            stages.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![9, 9, 9]
        );
    }

    #[test]
    fn vgg_stages_split_at_width_changes() {
        let v = build_vgg16_cifar();
        let lens: Vec<usize> = detect_stages(&v).unwrap().iter().map(Vec::len).collect();
        assert_eq!(lens, vec![2, 2, 3, 3, 3]);
    }

    #[test]
    fn conversion_keeps_io_contract() {
        let r = build_resnet(56).unwrap();
        let g = g_ghostify(&r, 0.5, CheapOp::Conv1x1, true).unwrap();
        assert_eq!(g.nodes.len(), 1 + 3 + 2);
        assert_eq!(g.output_shape().unwrap(), r.output_shape().unwrap());
        let c = c_ghostify(&r, 2, 3).unwrap();
        assert_eq!(c.output_shape().unwrap(), r.output_shape().unwrap());
        assert_eq!(c_ghostify(&r, 1, 3).unwrap(), r);
        assert_eq!(
            g_ghostify(&r, 0.0, CheapOp::Conv1x1, true).unwrap().nodes,
            r.nodes
        );
    }

    #[test]
    fn no_blocks_is_an_error() {
        let a = ArchSpec::new("empty", [3, 4, 4]);
        assert!(matches!(detect_stages(&a), Err(Error::Graph { .. })));
    }
}
