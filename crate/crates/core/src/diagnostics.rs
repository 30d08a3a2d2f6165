//! Post-training analysis: path similarity, dead channels and path ensembles.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{AggregationMode, ArchGraph, LayerKind};
use crate::data::Dataset;
use crate::engine::{self, Mode, ModelState, Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("layer `{0}` not found")]
    UnknownLayer(String),
    #[error("layer `{layer}` ({kind:?}) has no per-path channel structure")]
    NoChannelStructure { layer: String, kind: LayerKind },
    #[error("layer `{layer}`: {channels} channels cannot be split into {groups} groups")]
    Ragged {
        layer: String,
        channels: usize,
        groups: usize,
    },
    #[error("evaluation set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn centered(x: ArrayView2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty rows");
    &x - &mean
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear CKA between `N x d1` and `N x d2` feature matrices.
///
/// Returns `Ok(None)` when either input has no variance, where the index is undefined.
pub fn linear_cka(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Option<f64>, DiagError> {
    if x.nrows() != y.nrows() {
        return Err(DiagError::Shape(format!("{} rows vs {} rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(DiagError::Shape("linear CKA needs at least two samples".into()));
    }
    let (xc, yc) = (centered(x), centered(y));
    let xx = frobenius(&xc.t().dot(&xc));
    let yy = frobenius(&yc.t().dot(&yc));
    if xx == 0.0 || yy == 0.0 {
        return Ok(None);
    }
    let yx = frobenius(&yc.t().dot(&xc));
    Ok(Some(yx * yx / (xx * yy)))
}

/// Per-path classifier outputs on an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutputs {
    /// `[N, M, classes]`.
    pub path_logits: Array3<f64>,
    pub labels: Vec<usize>,
    pub per_path_accuracy: Vec<f64>,
    pub aggregated_accuracy: f64,
    pub mode: AggregationMode,
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, v) in row.enumerate() {
        if j == 0 || v > best.1 {
            best = (j, v);
        }
    }
    best.0
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl PathOutputs {
    pub fn new(path_logits: Array3<f64>, labels: Vec<usize>, mode: AggregationMode) -> Result<Self, DiagError> {
        let (n, m, _) = path_logits.dim();
        if labels.len() != n {
            return Err(DiagError::Shape(format!("{} labels for {n} samples", labels.len())));
        }
        if m == 0 {
            return Err(DiagError::Shape("no paths".into()));
        }
        let mut po = PathOutputs {
            path_logits,
            labels,
            per_path_accuracy: Vec::new(),
            aggregated_accuracy: 0.0,
            mode,
        };
        po.per_path_accuracy = (0..m).map(|p| po.subset_accuracy(&[p])).collect();
        po.aggregated_accuracy = po.subset_accuracy(&(0..m).collect::<Vec<_>>());
        Ok(po)
    }

    pub fn samples(&self) -> usize {
        self.path_logits.dim().0
    }

    pub fn paths(&self) -> usize {
        self.path_logits.dim().1
    }

    /// Predicted class of one path for one sample.
    pub fn path_prediction(&self, sample: usize, path: usize) -> usize {
        argmax(self.path_logits.slice(ndarray::s![sample, path, ..]).iter().cloned())
    }

    /// Accuracy of averaging the listed paths (in the configured aggregation mode).
    pub fn subset_accuracy(&self, paths: &[usize]) -> f64 {
        let (n, _, k) = self.path_logits.dim();
        if n == 0 {
            return 0.0;
        }
        let mut correct = 0;
        let mut acc = vec![0f64; k];
        for i in 0..n {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &p in paths {
                let row: Vec<f64> = self.path_logits.slice(ndarray::s![i, p, ..]).to_vec();
                let contrib = match self.mode {
                    AggregationMode::Logits => row,
                    AggregationMode::Probabilities => softmax(&row),
                };
                for (a, v) in acc.iter_mut().zip(contrib) {
                    *a += v;
                }
            }
            let scale = paths.len() as f64;
            if argmax(acc.iter().map(|a| a / scale)) == self.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / n as f64
    }
}

/// Eval-mode per-path outputs of the model on `ds`.
pub fn collect_path_outputs<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<PathOutputs, DiagError> {
    if ds.is_empty() {
        return Err(DiagError::EmptyDataset);
    }
    let m = g.path_multiplicity;
    let k = g.num_classes();
    let mut all = Vec::with_capacity(ds.len() * m * k);
    for (start, end) in batches(ds.len(), batch_size) {
        let x: Tensor<T> = ds.images.slice_batch(start, end).cast();
        let pass = engine::forward(g, state, &x, Mode::Eval, false)?;
        all.extend(pass.path_logits.data().iter().map(|v| v.to_f64_lossy()));
    }
    let arr = Array3::from_shape_vec((ds.len(), m, k), all).map_err(|e| DiagError::Shape(e.to_string()))?;
    PathOutputs::new(arr, ds.labels.clone(), g.aggregation)
}

fn batches(n: usize, bs: usize) -> impl Iterator<Item = (usize, usize)> {
    let bs = bs.max(1);
    (0..n).step_by(bs).map(move |s| (s, (s + bs).min(n)))
}

/// Fraction of samples that at least one path classifies correctly.
pub fn oracle_accuracy(po: &PathOutputs) -> f64 {
    let n = po.samples();
    if n == 0 {
        return 0.0;
    }
    let hits = (0..n)
        .filter(|&i| (0..po.paths()).any(|p| po.path_prediction(i, p) == po.labels[i]))
        .count();
    hits as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    BestFirst,
    WorstFirst,
    Original,
}

impl Ordering {
    pub const ALL: [Ordering; 3] = [Ordering::BestFirst, Ordering::WorstFirst, Ordering::Original];

    pub fn name(self) -> &'static str {
        match self {
            Ordering::BestFirst => "best_first",
            Ordering::WorstFirst => "worst_first",
            Ordering::Original => "original",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub ordering: Ordering,
    pub path_order: Vec<usize>,
    /// Entry `k - 1` is the accuracy of averaging the first `k` paths.
    pub accuracy: Vec<f64>,
}

/// Path order for one curve; ties in accuracy keep ascending path index.
pub fn path_order(per_path_accuracy: &[f64], ordering: Ordering) -> Vec<usize> {
    let mut order: Vec<usize> = (0..per_path_accuracy.len()).collect();
    match ordering {
        Ordering::Original => {}
        Ordering::BestFirst => order.sort_by(|&a, &b| per_path_accuracy[b].total_cmp(&per_path_accuracy[a])),
        Ordering::WorstFirst => order.sort_by(|&a, &b| per_path_accuracy[a].total_cmp(&per_path_accuracy[b])),
    }
    order
}

/// Prefix-ensemble accuracy under best-first, worst-first and original orderings.
pub fn cumulative_curves(po: &PathOutputs) -> Vec<CumulativeCurve> {
    Ordering::ALL
        .iter()
        .map(|&ordering| {
            let order = path_order(&po.per_path_accuracy, ordering);
            let accuracy = (1..=order.len()).map(|k| po.subset_accuracy(&order[..k])).collect();
            CumulativeCurve {
                ordering,
                path_order: order,
                accuracy,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaOptions {
    /// Layers to analyse; `None` selects every ReLU output.
    #[serde(default)]
    pub layers: Option<Vec<String>>,
    /// Contiguous channel blocks compared in a single-path model.
    #[serde(default = "default_reference_groups")]
    pub reference_groups: usize,
    #[serde(default)]
    pub full_matrix: bool,
}

fn default_reference_groups() -> usize {
    4
}

impl Default for CkaOptions {
    fn default() -> Self {
        CkaOptions {
            layers: None,
            reference_groups: default_reference_groups(),
            full_matrix: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCka {
    pub layer: String,
    pub groups: usize,
    /// Mean over unordered pairs with a defined CKA value.
    pub mean_cka: Option<f64>,
    pub undefined_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<Option<f64>>>>,
}

/// Mean pairwise CKA between `groups` contiguous column blocks of `features`.
#[allow(clippy::needless_range_loop)]
pub fn group_cka(features: ArrayView2<f64>, groups: usize, full_matrix: bool) -> Result<LayerCka, DiagError> {
    let c = features.ncols();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(DiagError::Ragged {
            layer: String::new(),
            channels: c,
            groups,
        });
    }
    let w = c / groups;
    let block = |p: usize| features.slice(ndarray::s![.., p * w..(p + 1) * w]);
    let mut matrix = vec![vec![None; groups]; groups];
    let (mut sum, mut count, mut undefined) = (0f64, 0usize, 0usize);
    for a in 0..groups {
        matrix[a][a] = linear_cka(block(a), block(a))?;
        for b in a + 1..groups {
            let v = linear_cka(block(a), block(b))?;
            matrix[a][b] = v;
            matrix[b][a] = v;
            match v {
                Some(v) => {
                    sum += v;
                    count += 1;
                }
                None => undefined += 1,
            }
        }
    }
    Ok(LayerCka {
        layer: String::new(),
        groups,
        mean_cka: (count > 0).then(|| sum / count as f64),
        undefined_pairs: undefined,
        matrix: full_matrix.then_some(matrix),
    })
}

/// Spatially averaged activations (`N x C`) of the listed layers over `ds`.
pub fn pooled_features<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    ds: &Dataset,
    layers: &[usize],
    batch_size: usize,
) -> Result<Vec<Array2<f64>>, DiagError> {
    if ds.is_empty() {
        return Err(DiagError::EmptyDataset);
    }
    let mut out: Vec<Array2<f64>> = layers
        .iter()
        .map(|&i| Array2::zeros((ds.len(), g.layers[i].out_channels)))
        .collect();
    for (start, end) in batches(ds.len(), batch_size) {
        let x: Tensor<T> = ds.images.slice_batch(start, end).cast();
        let pass = engine::forward(g, state, &x, Mode::Eval, true)?;
        let taps = pass.taps().ok_or(TensorError::NoTrace)?;
        for (slot, &li) in layers.iter().enumerate() {
            let t = &taps[li];
            let [n, c, h, w] = t.dims4();
            let hw = h * w;
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    let mean = t.data()[base..base + hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64;
                    out[slot][[start + s, ch]] = mean;
                }
            }
        }
    }
    Ok(out)
}

fn select_layers(g: &ArchGraph, opts: &CkaOptions) -> Result<Vec<usize>, DiagError> {
    match &opts.layers {
        None => Ok(g
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::ReLU)
            .map(|(i, _)| i)
            .collect()),
        Some(ids) => ids
            .iter()
            .map(|id| {
                let i = g.index_of(id).ok_or_else(|| DiagError::UnknownLayer(id.clone()))?;
                let kind = g.layers[i].kind;
                if matches!(kind, LayerKind::Input | LayerKind::Aggregate) {
                    return Err(DiagError::NoChannelStructure {
                        layer: id.clone(),
                        kind,
                    });
                }
                Ok(i)
            })
            .collect(),
    }
}

/// Mean pairwise CKA between paths (or reference blocks when `M = 1`) at each selected layer.
pub fn layerwise_group_cka<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    ds: &Dataset,
    opts: &CkaOptions,
    batch_size: usize,
) -> Result<Vec<LayerCka>, DiagError> {
    let layers = select_layers(g, opts)?;
    let groups = if g.path_multiplicity > 1 {
        g.path_multiplicity
    } else {
        opts.reference_groups
    };
    for &i in &layers {
        let c = g.layers[i].out_channels;
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(DiagError::Ragged {
                layer: g.layers[i].id.clone(),
                channels: c,
                groups,
            });
        }
    }
    let feats = pooled_features(g, state, ds, &layers, batch_size)?;
    layers
        .iter()
        .zip(feats)
        .map(|(&i, f)| {
            let mut r = group_cka(f.view(), groups, opts.full_matrix)?;
            r.layer = g.layers[i].id.clone();
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDnr {
    pub layer: String,
    pub dead: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Channels whose maximum over all samples and positions is exactly zero, per ReLU layer.
pub fn dead_neuron_ratio<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Vec<LayerDnr>, DiagError> {
    if ds.is_empty() {
        return Err(DiagError::EmptyDataset);
    }
    let relus: Vec<usize> = (0..g.layers.len())
        .filter(|&i| g.layers[i].kind == LayerKind::ReLU)
        .collect();
    let mut maxima: Vec<Vec<f64>> = relus.iter().map(|&i| vec![0.0; g.layers[i].out_channels]).collect();
    for (start, end) in batches(ds.len(), batch_size) {
        let x: Tensor<T> = ds.images.slice_batch(start, end).cast();
        let pass = engine::forward(g, state, &x, Mode::Eval, true)?;
        let taps = pass.taps().ok_or(TensorError::NoTrace)?;
        for (slot, &li) in relus.iter().enumerate() {
            let t = &taps[li];
            let [n, c, h, w] = t.dims4();
            for s in 0..n {
                for (ch, max) in maxima[slot].iter_mut().enumerate().take(c) {
                    let base = (s * c + ch) * h * w;
                    for v in &t.data()[base..base + h * w] {
                        *max = max.max(v.to_f64_lossy());
                    }
                }
            }
        }
    }
    Ok(relus
        .iter()
        .zip(maxima)
        .map(|(&i, mx)| {
            let dead = mx.iter().filter(|&&v| v == 0.0).count();
            LayerDnr {
                layer: g.layers[i].id.clone(),
                dead,
                total: mx.len(),
                ratio: dead as f64 / mx.len() as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub r: usize,
    #[serde(rename = "M")]
    pub paths: usize,
    pub samples: usize,
    pub aggregation: AggregationMode,
    pub cka_per_layer: Vec<LayerCka>,
    pub dnr_per_layer: Vec<LayerDnr>,
    pub per_path_accuracy: Vec<f64>,
    pub aggregated_accuracy: f64,
    pub oracle_accuracy: f64,
    pub cumulative_curves: Vec<CumulativeCurve>,
    /// Block count used for CKA when the model has a single path.
    pub reference_groups: usize,
}

pub fn diagnose<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    ds: &Dataset,
    opts: &CkaOptions,
    batch_size: usize,
) -> Result<DiagnosticsReport, DiagError> {
    let po = collect_path_outputs(g, state, ds, batch_size)?;
    Ok(DiagnosticsReport {
        r: g.r,
        paths: g.path_multiplicity,
        samples: ds.len(),
        aggregation: g.aggregation,
        cka_per_layer: layerwise_group_cka(g, state, ds, opts, batch_size)?,
        dnr_per_layer: dead_neuron_ratio(g, state, ds, batch_size)?,
        per_path_accuracy: po.per_path_accuracy.clone(),
        aggregated_accuracy: po.aggregated_accuracy,
        oracle_accuracy: oracle_accuracy(&po),
        cumulative_curves: cumulative_curves(&po),
        reference_groups: opts.reference_groups,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl DiagnosticsReport {
    /// Writes `diag.json` and the flat CSV companions into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), DiagError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("diag.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut w = csv::Writer::from_path(dir.join("cka_layerwise.csv"))?;
        w.write_record(["layer", "groups", "mean_cka", "undefined_pairs"])?;
        for c in &self.cka_per_layer {
            w.write_record([
                c.layer.clone(),
                c.groups.to_string(),
                opt(c.mean_cka),
                c.undefined_pairs.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("dnr_layerwise.csv"))?;
        w.write_record(["layer", "dead", "total", "ratio"])?;
        for d in &self.dnr_per_layer {
            w.write_record([
                d.layer.clone(),
                d.dead.to_string(),
                d.total.to_string(),
                d.ratio.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("cumulative_curves.csv"))?;
        w.write_record(["ordering", "k", "accuracy"])?;
        for c in &self.cumulative_curves {
            for (k, a) in c.accuracy.iter().enumerate() {
                w.write_record([c.ordering.name().to_string(), (k + 1).to_string(), a.to_string()])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("paths.csv"))?;
        w.write_record(["path", "accuracy"])?;
        for (p, a) in self.per_path_accuracy.iter().enumerate() {
            w.write_record([p.to_string(), a.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
