//! The multi-narrow rewrite: narrow every path by `1/r` and run `r^2` of them side by side.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{AggregationMode, ArchError, ArchGraph, LayerKind, LayerPosition, LayerSpec};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("layer `{layer}`: width {width} is not divisible by {divisor}")]
    NotDivisible {
        layer: String,
        width: usize,
        divisor: usize,
    },
    #[error("graph is already transformed (r = {r}, M = {m})")]
    AlreadyTransformed { r: usize, m: usize },
    #[error("r must be at least 1")]
    ZeroStrength,
    #[error("layer `{layer}`: {msg}")]
    Unsupported { layer: String, msg: String },
    #[error("cannot aggregate zero path outputs")]
    EmptyAggregate,
    #[error("path output {index} has length {got}, expected {expected}")]
    RaggedAggregate { index: usize, got: usize, expected: usize },
    #[error(transparent)]
    Arch(#[from] ArchError),
}

/// Statistics grouping used by normalization layers after the rewrite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// One statistics group per path, spanning that path's whole channel block.
    #[default]
    PerPathStats,
    /// Statistics per channel, as in the baseline batch normalization.
    PerChannel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthRounding {
    #[default]
    RequireDivisible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub r: usize,
    #[serde(default)]
    pub norm_policy: NormPolicy,
    #[serde(default)]
    pub width_rounding: WidthRounding,
    #[serde(default)]
    pub aggregation: AggregationMode,
}

impl TransformConfig {
    pub fn new(r: usize) -> Self {
        TransformConfig {
            r,
            norm_policy: NormPolicy::default(),
            width_rounding: WidthRounding::default(),
            aggregation: AggregationMode::default(),
        }
    }

    pub fn paths(&self) -> usize {
        path_count(self.r)
    }
}

pub fn path_count(r: usize) -> usize {
    r * r
}

fn divide(layer: &LayerSpec, width: usize, divisor: usize) -> Result<usize, TransformError> {
    if !width.is_multiple_of(divisor) {
        return Err(TransformError::NotDivisible {
            layer: layer.id.clone(),
            width,
            divisor,
        });
    }
    Ok(width / divisor)
}

/// Rewrites a baseline graph into its `r^2`-path form.
///
/// Every channel count becomes `r * C` in total (`C / r` per path) and every
/// grouped layer multiplies its group count by `M`, so path `m` owns the
/// `m`-th contiguous channel block everywhere. Layers reading the raw input
/// tile it `M` times; the classifier becomes `M` heads feeding an
/// `Aggregate` sink. `r == 1` returns the graph unchanged.
pub fn mn_transform(g: &ArchGraph, cfg: &TransformConfig) -> Result<ArchGraph, TransformError> {
    let r = cfg.r;
    if r == 0 {
        return Err(TransformError::ZeroStrength);
    }
    if g.is_transformed() || g.sink().kind == LayerKind::Aggregate {
        return Err(TransformError::AlreadyTransformed {
            r: g.r,
            m: g.path_multiplicity,
        });
    }
    g.validate()?;
    if r == 1 {
        return Ok(g.clone());
    }
    let m = path_count(r);
    let mut layers = Vec::with_capacity(g.layers.len() + 1);
    for (i, layer) in g.layers.iter().enumerate() {
        let mut out = layer.clone();
        let position = g.position_of(i);
        match layer.kind {
            LayerKind::Input => {}
            LayerKind::Conv2d | LayerKind::Dense => {
                let per_path_out = divide(layer, layer.out_channels, r)?;
                divide(layer, per_path_out, layer.groups)?;
                out.out_channels = layer.out_channels * r;
                out.groups = layer.groups * m;
                if position == LayerPosition::InputFacing {
                    out.input_replicas = m;
                    out.in_channels = layer.in_channels * m;
                } else {
                    let per_path_in = divide(layer, layer.in_channels, r)?;
                    divide(layer, per_path_in, layer.groups)?;
                    out.in_channels = layer.in_channels * r;
                }
            }
            LayerKind::DepthwiseConv2d => {
                if position == LayerPosition::InputFacing {
                    return Err(TransformError::Unsupported {
                        layer: layer.id.clone(),
                        msg: "depthwise convolution directly on the input".into(),
                    });
                }
                divide(layer, layer.out_channels, r)?;
                out.in_channels = layer.in_channels * r;
                out.out_channels = layer.out_channels * r;
                out.groups = layer.groups * r;
            }
            LayerKind::Norm => {
                divide(layer, layer.out_channels, r)?;
                out.in_channels = layer.in_channels * r;
                out.out_channels = layer.out_channels * r;
                out.groups = match cfg.norm_policy {
                    NormPolicy::PerPathStats => m,
                    NormPolicy::PerChannel => layer.out_channels * r,
                };
            }
            LayerKind::ReLU | LayerKind::Pool | LayerKind::GlobalPool | LayerKind::Add => {
                divide(layer, layer.out_channels, r)?;
                out.in_channels = layer.in_channels * r;
                out.out_channels = layer.out_channels * r;
            }
            LayerKind::ClassifierHead => {
                let per_path_in = divide(layer, layer.in_channels, r)?;
                divide(layer, per_path_in, layer.groups)?;
                divide(layer, layer.out_channels, layer.groups)?;
                out.in_channels = layer.in_channels * r;
                out.out_channels = layer.out_channels * m;
                out.groups = layer.groups * m;
            }
            LayerKind::Aggregate => unreachable!("rejected above"),
        }
        layers.push(out);
    }
    let head = g.sink();
    layers.push(LayerSpec {
        id: "aggregate".into(),
        kind: LayerKind::Aggregate,
        kernel: 0,
        in_channels: head.out_channels * m,
        out_channels: head.out_channels,
        groups: m,
        stride: 1,
        has_bias: false,
        predecessors: vec![head.id.clone()],
        input_replicas: 1,
        stage: None,
    });
    let out = ArchGraph {
        r,
        path_multiplicity: m,
        stage_widths: g.stage_widths.iter().map(|c| c * r).collect(),
        aggregation: cfg.aggregation,
        layers,
    };
    out.validate()?;
    Ok(out)
}

/// Elementwise mean of `M` path outputs, summed in path order.
pub fn aggregate_outputs<T: Float>(path_logits: &[Vec<T>]) -> Result<Vec<T>, TransformError> {
    let first = path_logits.first().ok_or(TransformError::EmptyAggregate)?;
    let len = first.len();
    let mut acc = vec![T::zero(); len];
    for (index, v) in path_logits.iter().enumerate() {
        if v.len() != len {
            return Err(TransformError::RaggedAggregate {
                index,
                got: v.len(),
                expected: len,
            });
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a = *a + x;
        }
    }
    let m = T::from(path_logits.len()).unwrap();
    Ok(acc.into_iter().map(|a| a / m).collect())
}
