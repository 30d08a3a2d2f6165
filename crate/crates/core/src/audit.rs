//! Analytic parameter, MAC and activation accounting for an [`ArchGraph`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{classify_graph, ArchError, ArchGraph, LayerKind, LayerSpec, PreservationClass};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("channels {c_in}->{c_out} are not divisible by groups {groups}")]
    Divisibility { c_in: usize, c_out: usize, groups: usize },
    #[error("reports do not describe the same baseline lineage: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
}

/// Multiply-accumulates charged per output element of a normalization layer.
///
/// Conv and linear layers always cost one MAC per weight-input product;
/// pooling, activations, residual adds and aggregation cost nothing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    /// Norm layers free.
    LayerOnly,
    /// Norm layers cost 2 per element (affine scale and shift), inference form.
    #[default]
    Eval,
    /// Norm layers cost 5 per element (batch statistics plus affine), training form.
    Train,
}

impl MacConvention {
    pub fn norm_macs_per_element(self) -> u64 {
        match self {
            MacConvention::LayerOnly => 0,
            MacConvention::Eval => 2,
            MacConvention::Train => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditOptions {
    pub height: usize,
    pub width: usize,
    pub batch_size: u64,
    pub convention: MacConvention,
    /// Bytes per stored activation element.
    pub element_bytes: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            height: 32,
            width: 32,
            batch_size: 1,
            convention: MacConvention::Eval,
            element_bytes: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub id: String,
    pub kind: LayerKind,
    pub class: PreservationClass,
    pub weight_params: u64,
    pub bias_params: u64,
    pub params: u64,
    pub macs: u64,
    pub activation_channels: usize,
    pub activation_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub r: usize,
    #[serde(rename = "M")]
    pub paths: usize,
    pub options: AuditOptions,
    pub per_layer: Vec<LayerAudit>,
    pub total_params: u64,
    pub total_macs_per_batch: u64,
    pub activation_elements: u64,
    pub activation_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_params: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_vs_baseline_percent: Option<f64>,
}

impl AuditReport {
    pub fn attach_baseline(&mut self, baseline: &AuditReport) {
        self.baseline_params = Some(baseline.total_params);
        self.gain_vs_baseline_percent = Some(gain_percent(baseline.total_params, self.total_params));
    }

    pub fn layer(&self, id: &str) -> Option<&LayerAudit> {
        self.per_layer.iter().find(|l| l.id == id)
    }

    /// Sum of parameters over layers of the given class.
    pub fn params_of_class(&self, class: PreservationClass) -> u64 {
        self.per_layer
            .iter()
            .filter(|l| l.class == class)
            .map(|l| l.params)
            .sum()
    }
}

pub fn gain_percent(baseline: u64, transformed: u64) -> f64 {
    if transformed == baseline {
        return 0.0;
    }
    (transformed as f64 - baseline as f64) / baseline as f64 * 100.0
}

/// `K^2 * (C_in / groups) * C_out`, plus `C_out` when biased.
pub fn conv_params(kernel: usize, c_in: usize, c_out: usize, groups: usize, has_bias: bool) -> Result<u64, AuditError> {
    if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
        return Err(AuditError::Divisibility { c_in, c_out, groups });
    }
    let weights = (kernel * kernel) as u64 * (c_in / groups) as u64 * c_out as u64;
    Ok(weights + if has_bias { c_out as u64 } else { 0 })
}

fn layer_params(layer: &LayerSpec) -> Result<(u64, u64), AuditError> {
    let bias = if layer.has_bias { layer.out_channels as u64 } else { 0 };
    Ok(match layer.kind {
        LayerKind::Conv2d | LayerKind::DepthwiseConv2d => (
            conv_params(layer.kernel, layer.in_channels, layer.out_channels, layer.groups, false)?,
            bias,
        ),
        LayerKind::Dense | LayerKind::ClassifierHead => (
            conv_params(1, layer.in_channels, layer.out_channels, layer.groups, false)?,
            bias,
        ),
        // per-channel scale and shift
        LayerKind::Norm => (layer.out_channels as u64, layer.out_channels as u64),
        _ => (0, 0),
    })
}

/// Full per-layer audit at the given resolution, batch size and MAC convention.
pub fn audit(g: &ArchGraph, opts: &AuditOptions) -> Result<AuditReport, AuditError> {
    g.validate()?;
    let classes = classify_graph(g)?;
    let plan = g.spatial_plan(opts.height, opts.width)?;
    let batch = opts.batch_size;
    let mut per_layer = Vec::with_capacity(g.layers.len());
    for (i, layer) in g.layers.iter().enumerate() {
        let (weight_params, bias_params) = layer_params(layer)?;
        let (oh, ow) = plan[i];
        let positions = (oh * ow) as u64;
        let elements = batch * layer.out_channels as u64 * positions;
        let macs = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::Dense | LayerKind::ClassifierHead => {
                weight_params * positions * batch
            }
            LayerKind::Norm => opts.convention.norm_macs_per_element() * elements,
            _ => 0,
        };
        per_layer.push(LayerAudit {
            id: layer.id.clone(),
            kind: layer.kind,
            class: classes[i],
            weight_params,
            bias_params,
            params: weight_params + bias_params,
            macs,
            activation_channels: layer.out_channels,
            activation_elements: if layer.kind == LayerKind::Input { 0 } else { elements },
        });
    }
    let total_params = per_layer.iter().map(|l| l.params).sum();
    let total_macs_per_batch = per_layer.iter().map(|l| l.macs).sum();
    let activation_elements: u64 = per_layer.iter().map(|l| l.activation_elements).sum();
    Ok(AuditReport {
        r: g.r,
        paths: g.path_multiplicity,
        options: *opts,
        per_layer,
        total_params,
        total_macs_per_batch,
        activation_elements,
        activation_bytes: activation_elements * opts.element_bytes,
        baseline_params: None,
        gain_vs_baseline_percent: None,
    })
}

/// Parameter audit at the default 32x32, batch-1 setting.
pub fn count_params(g: &ArchGraph) -> Result<AuditReport, AuditError> {
    audit(g, &AuditOptions::default())
}

pub fn count_macs(g: &ArchGraph, height: usize, width: usize, batch_size: u64) -> Result<u64, AuditError> {
    count_macs_with(g, height, width, batch_size, MacConvention::default())
}

pub fn count_macs_with(
    g: &ArchGraph,
    height: usize,
    width: usize,
    batch_size: u64,
    convention: MacConvention,
) -> Result<u64, AuditError> {
    let opts = AuditOptions {
        height,
        width,
        batch_size,
        convention,
        ..AuditOptions::default()
    };
    Ok(audit(g, &opts)?.total_macs_per_batch)
}

/// Elements stored across every non-input layer output for one batch.
pub fn activation_footprint(g: &ArchGraph, height: usize, width: usize, batch_size: u64) -> Result<u64, AuditError> {
    let opts = AuditOptions {
        height,
        width,
        batch_size,
        ..AuditOptions::default()
    };
    Ok(audit(g, &opts)?.activation_elements)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preservation {
    PreservedExactly,
    InflatedByR,
    InflatedOther,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationEntry {
    pub id: String,
    pub class: PreservationClass,
    pub params_before: u64,
    pub params_after: u64,
    pub outcome: Preservation,
}

/// Compares a transformed audit against its baseline, layer by layer.
///
/// Layers present only in the transformed graph (the aggregation sink) are
/// parameter-free and are skipped.
pub fn preservation_report(
    baseline: &AuditReport,
    transformed: &AuditReport,
) -> Result<Vec<PreservationEntry>, AuditError> {
    if baseline.r != 1 || baseline.paths != 1 {
        return Err(AuditError::Mismatch("baseline report is itself transformed".into()));
    }
    let r = transformed.r as u64;
    let mut out = Vec::with_capacity(baseline.per_layer.len());
    for before in &baseline.per_layer {
        let after = transformed
            .layer(&before.id)
            .ok_or_else(|| AuditError::Mismatch(format!("layer `{}` missing after transform", before.id)))?;
        if after.kind != before.kind {
            return Err(AuditError::Mismatch(format!("layer `{}` changed kind", before.id)));
        }
        let outcome = if after.params == before.params {
            Preservation::PreservedExactly
        } else if after.weight_params == r * before.weight_params {
            Preservation::InflatedByR
        } else {
            Preservation::InflatedOther
        };
        out.push(PreservationEntry {
            id: before.id.clone(),
            class: before.class,
            params_before: before.params,
            params_after: after.params,
            outcome,
        });
    }
    for after in &transformed.per_layer {
        if baseline.layer(&after.id).is_none() && after.params != 0 {
            return Err(AuditError::Mismatch(format!(
                "unexpected parameterized layer `{}`",
                after.id
            )));
        }
    }
    Ok(out)
}

/// Parameter count of one widening factor relative to r = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSweepRow {
    pub r: usize,
    pub params: u64,
    /// Millions, rounded to one decimal.
    pub params_m: f64,
    /// Increase over r = 1 from exact counts.
    pub gain_percent: f64,
    /// Increase over r = 1 recomputed from the rounded `params_m`, to one decimal.
    pub gain_percent_rounded: f64,
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Parameter totals for each `r`, keyed against the first entry's baseline.
pub fn param_sweep(baseline: &ArchGraph, rs: &[usize]) -> Result<Vec<ParamSweepRow>, crate::Error> {
    let base = count_params(baseline)?.total_params;
    let base_m = round_to(base as f64 / 1e6, 1);
    let mut rows = Vec::with_capacity(rs.len());
    for &r in rs {
        let g = crate::transform::mn_transform(baseline, &crate::transform::TransformConfig::new(r))?;
        let params = count_params(&g)?.total_params;
        let params_m = round_to(params as f64 / 1e6, 1);
        rows.push(ParamSweepRow {
            r,
            params,
            params_m,
            gain_percent: gain_percent(base, params),
            gain_percent_rounded: round_to((params_m / base_m - 1.0) * 100.0, 1),
        });
    }
    Ok(rows)
}
