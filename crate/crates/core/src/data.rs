//! Dataset ingestion, synthetic generators and class-balanced subsampling.
//!
//! Random choices use `ChaCha8Rng` seeded with `seed_from_u64` (rand_chacha
//! 0.9) and `SliceRandom::shuffle` (rand 0.9, Fisher-Yates from the back),
//! so an index file can be regenerated from `(source, ipc, seed)` alone.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;

/// Bytes of pixel data in one CIFAR record (3 planes of 32x32).
pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: size {actual} is not a multiple of the {record}-byte record (expected {expected} bytes for {records} records)")]
    Size {
        path: String,
        actual: usize,
        record: usize,
        expected: usize,
        records: usize,
    },
    #[error("{path}: empty file")]
    Empty { path: String },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("class {class} has {have} samples, fewer than ipc {ipc}")]
    InsufficientClass { class: usize, have: usize, ipc: usize },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse and fine label bytes per record; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, pixels in `[0, 1]` until standardized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Samples per class after [`subsample_ipc`].
    pub ipc: Option<usize>,
    pub provenance: Provenance,
    /// Row of each sample in the originally loaded source.
    pub source_indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.dims4()[1]
    }

    pub fn resolution(&self) -> (usize, usize) {
        let [_, _, h, w] = self.images.dims4();
        (h, w)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Rows `rows` of this dataset (positions in this dataset, not source indices).
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_batch(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            ipc: None,
            provenance: self.provenance.clone(),
            source_indices: rows.iter().map(|&i| self.source_indices[i]).collect(),
        }
    }
}

pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, source: &str) -> Result<Dataset, DataError> {
    let record = variant.record_len();
    if bytes.is_empty() {
        return Err(DataError::Empty { path: source.into() });
    }
    if !bytes.len().is_multiple_of(record) {
        let records = bytes.len() / record;
        return Err(DataError::Size {
            path: source.into(),
            actual: bytes.len(),
            record,
            expected: records * record,
            records,
        });
    }
    let n = bytes.len() / record;
    let classes = variant.classes();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for rec in bytes.chunks_exact(record) {
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(DataError::Label { label, classes });
        }
        labels.push(label);
        pixels.extend(rec[variant.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], pixels).expect("record arithmetic"),
        labels,
        class_count: classes,
        ipc: None,
        provenance: Provenance {
            source: source.into(),
            seed: None,
            split: "full".into(),
        },
        source_indices: (0..n).collect(),
    })
}

pub fn load_cifar_binary(path: impl AsRef<Path>, variant: CifarVariant) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_cifar_bytes(&bytes, variant, &path.display().to_string())
}

/// Encodes a 3x32x32 dataset in CIFAR binary layout (pixels quantized to bytes).
/// The CIFAR-100 form writes the fine label into both label bytes.
pub fn encode_cifar(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>, DataError> {
    if ds.images.dims4()[1..] != [3, 32, 32] {
        return Err(DataError::Invalid(format!(
            "CIFAR records need 3x32x32 images, got {:?}",
            ds.images.shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for (i, &label) in ds.labels.iter().enumerate() {
        if label > u8::MAX as usize || label >= variant.classes() {
            return Err(DataError::Label {
                label,
                classes: variant.classes(),
            });
        }
        for _ in 0..variant.label_bytes() {
            out.push(label as u8);
        }
        let px = &ds.images.data()[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS];
        out.extend(px.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Sorted source indices of an `ipc`-per-class subsample.
///
/// Classes are visited in ascending order; each class's indices (ascending)
/// are shuffled by one shared generator and the first `ipc` kept.
pub fn subsample_indices(labels: &[usize], class_count: usize, ipc: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if ipc == 0 {
        return Err(DataError::Invalid("ipc must be positive".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(DataError::Label {
                label: l,
                classes: class_count,
            });
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(ipc * class_count);
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < ipc {
            return Err(DataError::InsufficientClass {
                class,
                have: members.len(),
                ipc,
            });
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..ipc]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Exactly `ipc` samples of every class, ordered by position in `ds`.
pub fn subsample_ipc(ds: &Dataset, ipc: usize, seed: u64) -> Result<Dataset, DataError> {
    let rows = subsample_indices(&ds.labels, ds.class_count, ipc, seed)?;
    let mut out = ds.select(&rows);
    out.ipc = Some(ipc);
    out.provenance.seed = Some(seed);
    out.provenance.split = format!("ipc{ipc}");
    Ok(out)
}

/// Selects the samples whose source index appears in `indices`.
pub fn apply_indices(ds: &Dataset, indices: &[usize]) -> Result<Dataset, DataError> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(DataError::Invalid(format!(
            "index {bad} out of range for {} samples",
            ds.len()
        )));
    }
    let mut out = ds.select(indices);
    let hist = out.class_histogram();
    if hist.iter().all(|&h| h == hist[0]) {
        out.ipc = Some(hist[0]);
    }
    Ok(out)
}

pub fn write_indices(path: impl AsRef<Path>, indices: &[usize]) -> Result<(), DataError> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    std::fs::write(path, serde_json::to_string(&sorted)? + "\n")?;
    Ok(())
}

pub fn read_indices(path: impl AsRef<Path>) -> Result<Vec<usize>, DataError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthPattern {
    /// Oriented sinusoidal gratings; class fixes orientation, frequency and tint.
    #[default]
    Stripes,
    /// A bright square whose position is fixed by the class.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default)]
    pub pattern: SynthPattern,
    /// Standard deviation of additive pixel noise; zero also disables phase jitter.
    #[serde(default)]
    pub noise: f32,
}

fn three() -> usize {
    3
}

/// Deterministic class-separable toy images, interleaved by class.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(DataError::Invalid("synthetic spec dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let n = spec.classes * spec.samples_per_class;
    let mut pixels = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        let jitter = spec.noise > 0.0;
        let phase: f64 = if jitter { rng.random::<f64>() * tau } else { 0.0 };
        let tint = |ch: usize| 0.65 + 0.35 * (tau * (k + ch) as f64 / spec.classes.max(3) as f64).cos();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let base = match spec.pattern {
                        SynthPattern::Stripes => {
                            let angle = std::f64::consts::PI * (k % 4) as f64 / 4.0;
                            let cycles = 1.0 + (k / 4) as f64 + 0.5 * (k % 2) as f64;
                            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                            let t = u * angle.cos() + v * angle.sin();
                            0.5 + 0.4 * tint(ch) * (tau * cycles * t + phase).sin()
                        }
                        SynthPattern::Blobs => {
                            let grid = (spec.classes as f64).sqrt().ceil() as usize;
                            let (cy, cx) = ((k / grid) * h / grid, (k % grid) * w / grid);
                            let size = (h / grid).max(1);
                            let inside = y >= cy && y < cy + size && x >= cx && x < cx + size;
                            if inside {
                                0.9 * tint(ch)
                            } else {
                                0.1
                            }
                        }
                    };
                    let noise: f64 = if jitter {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * spec.noise as f64
                    } else {
                        0.0
                    };
                    pixels.push((base + noise).clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, c, h, w], pixels).expect("shape by construction"),
        labels,
        class_count: spec.classes,
        ipc: Some(spec.samples_per_class),
        provenance: Provenance {
            source: format!(
                "synthetic:{:?}:{}x{}x{}:{}cls:{}per:noise{}",
                spec.pattern, c, h, w, spec.classes, spec.samples_per_class, spec.noise
            ),
            seed: Some(seed),
            split: "full".into(),
        },
        source_indices: (0..n).collect(),
    })
}

/// Per-channel mean and standard deviation fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let [n, c, h, w] = ds.images.dims4();
        let hw = h * w;
        let d = ds.images.data();
        let mut mean = vec![0f32; c];
        let mut std = vec![0f32; c];
        for ch in 0..c {
            let mut acc = 0f64;
            for i in 0..n {
                acc += d[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mu = acc / (n * hw) as f64;
            let mut sq = 0f64;
            for i in 0..n {
                sq += d[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            std[ch] = ((sq / (n * hw) as f64).sqrt() as f32).max(1e-6);
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let [n, c, h, w] = ds.images.dims4();
        let hw = h * w;
        let d = ds.images.data_mut();
        for i in 0..n {
            for ch in 0..c {
                for v in &mut d[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v = (*v - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }
}
