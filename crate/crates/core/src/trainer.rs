//! Training protocol: decoupled-decay Adam or momentum SGD under cosine
//! annealing, with a single cross-entropy loss on the aggregated output.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, ArchGraph, LayerKind, LayerSpec};
use crate::data::Dataset;
use crate::engine::{self, checkpoint, ops, InitOptions, Mode, ModelState, Moments, Tensor, TensorError};
use crate::scalar::{DType, Scalar};

/// File name of the final checkpoint inside a run directory.
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {data} classes but the classifier has {model}")]
    ClassMismatch { data: usize, model: usize },
    #[error("dataset has {data} input channels but the graph expects {model}")]
    ChannelMismatch { data: usize, model: usize },
    #[error("step {step} > total steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("parameter `{key}`: moment shape {moment:?} does not match parameter shape {param:?}")]
    MomentShape {
        key: String,
        moment: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("loss became non-finite ({loss}) at step {step} (epoch {epoch})")]
    Divergence { step: u64, epoch: usize, loss: f64 },
    #[error("loss node `{0}` does not depend on an aggregate of the paths")]
    LossCone(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam moments with weight decay applied directly to the parameters.
    AdamW {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
    /// Heavy-ball SGD; weight decay enters the gradient as an L2 term.
    MomentumSgd {
        #[serde(default = "beta1")]
        momentum: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    CosineAnneal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentation {
    #[serde(default = "yes")]
    pub flip: bool,
    /// Maximum random translation in pixels (zero padded).
    #[serde(default = "four")]
    pub shift: usize,
}

fn yes() -> bool {
    true
}
fn four() -> usize {
    4
}

impl Default for Augmentation {
    fn default() -> Self {
        Augmentation { flip: true, shift: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Defaults to [`max_lr_for_batch`] of `batch_size`.
    #[serde(default)]
    pub max_lr: Option<f64>,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Defaults to [`epochs_for_ipc`] of the training set's ipc.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_precision")]
    pub precision: DType,
    /// Training-time augmentation; `None` (JSON `null`) disables it.
    #[serde(default = "default_augmentation")]
    pub augmentation: Option<Augmentation>,
    /// Also write a checkpoint every this many epochs.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_batch() -> usize {
    128
}
fn default_wd() -> f64 {
    5e-2
}
fn default_augmentation() -> Option<Augmentation> {
    Some(Augmentation::default())
}
fn default_precision() -> DType {
    DType::F32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            max_lr: None,
            weight_decay: default_wd(),
            epochs: None,
            seed: 0,
            optimizer: OptimizerKind::default(),
            schedule: Schedule::default(),
            precision: default_precision(),
            augmentation: default_augmentation(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn resolved_max_lr(&self) -> f64 {
        self.max_lr.unwrap_or_else(|| max_lr_for_batch(self.batch_size))
    }

    /// Epoch budget for a training set with `ipc` samples per class.
    pub fn resolved_epochs(&self, ipc: Option<usize>) -> Result<usize, TrainError> {
        match (self.epochs, ipc) {
            (Some(e), _) => Ok(e),
            (None, Some(ipc)) if ipc > 0 => Ok(epochs_for_ipc(ipc)),
            _ => Err(TrainError::Config(
                "epochs not set and the training set has no per-class count".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if let Some(lr) = self.max_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(TrainError::Config(format!(
                    "max_lr must be finite and non-negative, got {lr}"
                )));
            }
        }
        if self.epochs == Some(0) {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `5e-3 * batch / 128`.
pub fn max_lr_for_batch(batch_size: usize) -> f64 {
    5e-3 * batch_size as f64 / 128.0
}

/// 200 epochs at 100 or more images per class, proportionally more below.
pub fn epochs_for_ipc(ipc: usize) -> usize {
    if ipc >= 100 {
        200
    } else {
        (200.0 * 100.0 / ipc as f64).round() as usize
    }
}

pub fn cosine_lr(step: u64, total_steps: u64, max_lr: f64) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(max_lr);
    }
    let t = step as f64 / total_steps as f64;
    Ok(max_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

/// Applies one update from the gradients stored on `state.params`.
///
/// `step` counts previous updates (bias correction uses `step + 1`). Only
/// parameters flagged `decay` (conv and linear weights) are decayed.
pub fn optimizer_step<T: Scalar>(
    state: &mut ModelState<T>,
    optimizer: &OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
) -> Result<(), TrainError> {
    let ModelState { params, moments, .. } = state;
    for (key, p) in params.iter_mut() {
        let grad = p.grad.as_ref().ok_or_else(|| TrainError::MissingGrad(key.clone()))?;
        if grad.shape() != p.value.shape() {
            return Err(TrainError::MomentShape {
                key: key.clone(),
                moment: grad.shape().to_vec(),
                param: p.value.shape().to_vec(),
            });
        }
        let mom = moments.entry(key.clone()).or_insert_with(|| Moments {
            first: Tensor::zeros(p.value.shape()),
            second: Tensor::zeros(p.value.shape()),
        });
        for buf in [&mom.first, &mom.second] {
            if buf.shape() != p.value.shape() {
                return Err(TrainError::MomentShape {
                    key: key.clone(),
                    moment: buf.shape().to_vec(),
                    param: p.value.shape().to_vec(),
                });
            }
        }
        let lr_t = T::of(lr);
        let wd = if p.decay { T::of(weight_decay) } else { T::zero() };
        let theta = p.value.data_mut();
        let g = grad.data();
        match *optimizer {
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let c1 = T::one() - T::of(beta1.powi(t));
                let c2 = T::one() - T::of(beta2.powi(t));
                let eps = T::of(eps);
                let shrink = T::one() - lr_t * wd;
                let (m, v) = (mom.first.data_mut(), mom.second.data_mut());
                for i in 0..theta.len() {
                    m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                    v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    theta[i] = theta[i] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
            OptimizerKind::MomentumSgd { momentum } => {
                let mu = T::of(momentum);
                let buf = mom.first.data_mut();
                for i in 0..theta.len() {
                    let d = g[i] + wd * theta[i];
                    buf[i] = mu * buf[i] + d;
                    theta[i] -= lr_t * buf[i];
                }
            }
        }
    }
    Ok(())
}

/// The single layer whose output the loss reads.
///
/// For a multi-path graph this must be the `Aggregate` sink, so every path
/// receives gradient only through the averaged prediction.
pub fn loss_node(g: &ArchGraph) -> Result<&LayerSpec, TrainError> {
    let sink = g.sink();
    let ok = if g.path_multiplicity > 1 {
        sink.kind == LayerKind::Aggregate
    } else {
        matches!(sink.kind, LayerKind::ClassifierHead | LayerKind::Aggregate)
    };
    if ok {
        Ok(sink)
    } else {
        Err(TrainError::LossCone(sink.id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last update in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy on augmented train-mode batches.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: ModelState<T>,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Eval-mode accuracy on the unaugmented training set after the last epoch.
    pub final_train_accuracy: f64,
    pub final_val_accuracy: Option<f64>,
    pub steps: u64,
    pub epochs: usize,
    pub max_lr: f64,
}

fn check_compat(g: &ArchGraph, ds: &Dataset) -> Result<(), TrainError> {
    if ds.class_count != g.num_classes() {
        return Err(TrainError::ClassMismatch {
            data: ds.class_count,
            model: g.num_classes(),
        });
    }
    if ds.channels() != g.input_channels() {
        return Err(TrainError::ChannelMismatch {
            data: ds.channels(),
            model: g.input_channels(),
        });
    }
    Ok(())
}

fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Number of rows of `logits` (`[N, K]`) whose argmax equals the label.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count()
}

/// Applies a random flip and zero-padded shift to every image of `batch` in place.
pub fn augment<T: Scalar>(batch: &mut Tensor<T>, aug: &Augmentation, rng: &mut ChaCha8Rng) {
    let [n, c, h, w] = batch.dims4();
    let plane = h * w;
    let s = aug.shift as isize;
    let mut scratch = vec![T::zero(); c * plane];
    for i in 0..n {
        let flip = aug.flip && rng.random::<bool>();
        let (dy, dx) = if s > 0 {
            (
                rng.random_range(-(s as i64)..=s as i64) as isize,
                rng.random_range(-(s as i64)..=s as i64) as isize,
            )
        } else {
            (0, 0)
        };
        let img = &mut batch.data_mut()[i * c * plane..(i + 1) * c * plane];
        scratch.copy_from_slice(img);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let inside =
                        sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize && sx0 >= 0 && sx0 < w as isize;
                    img[ch * plane + y * w + x] = if inside {
                        scratch[ch * plane + sy as usize * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Eval-mode accuracy over `ds`, batched in order. Leaves `state` untouched.
pub fn evaluate<T: Scalar>(
    g: &ArchGraph,
    state: &ModelState<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..ds.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(ds.len());
        let x: Tensor<T> = ds.images.slice_batch(start, end).cast();
        let pass = engine::forward(g, state, &x, Mode::Eval, false)?;
        correct += count_correct(&pass.aggregated, &ds.labels[start..end]);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Writes `history` as `epoch,lr,train_loss,train_acc,val_acc`.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "train_acc", "val_acc"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:e}", r.lr),
            format!("{}", r.train_loss),
            format!("{}", r.train_acc),
            r.val_acc.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a freshly initialized model (seeded by `cfg.seed`).
///
/// With `out_dir`, writes `train_config.json`, `history.csv` and the final
/// checkpoint (plus periodic ones when `checkpoint_every` is set).
pub fn train<T: Scalar>(
    g: &ArchGraph,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    let state = ModelState::init(g, cfg.seed, InitOptions::default());
    train_from(g, state, train_ds, val_ds, cfg, out_dir)
}

/// Trains starting from `state` (its moments and step counter are continued).
pub fn train_from<T: Scalar>(
    g: &ArchGraph,
    mut state: ModelState<T>,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    g.validate()?;
    loss_node(g)?;
    check_compat(g, train_ds)?;
    if let Some(v) = val_ds {
        check_compat(g, v)?;
    }
    state.check_shapes(g)?;
    if train_ds.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let epochs = cfg.resolved_epochs(train_ds.ipc)?;
    let max_lr = cfg.resolved_max_lr();
    let n = train_ds.len();
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs) as u64;
    let total_steps = steps_per_epoch * epochs as u64;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0f64, 0usize, 0f64);
        for chunk in order.chunks(bs) {
            lr = cosine_lr(step, total_steps, max_lr)?;
            let mut x: Tensor<T> = train_ds.images.gather_batch(chunk).cast();
            if let Some(aug) = &cfg.augmentation {
                augment(&mut x, aug, &mut rng);
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
            let pass = engine::forward(g, &state, &x, Mode::Train, true)?;
            let (loss, grad) = ops::softmax_xent(&pass.aggregated, &labels)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(TrainError::Divergence { step, epoch, loss });
            }
            engine::backward(g, &mut state, &pass, &grad)?;
            let done = state.step;
            optimizer_step(&mut state, &cfg.optimizer, lr, cfg.weight_decay, done)?;
            state.update_running_stats(g, &pass);
            state.step += 1;
            state.clear_grads();
            loss_sum += loss * chunk.len() as f64;
            correct += count_correct(&pass.aggregated, &labels);
            step += 1;
        }
        let val_acc = match val_ds {
            Some(v) => Some(evaluate(g, &state, v, cfg.batch_size)?),
            None => None,
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
        });
        if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if every > 0 && epoch % every == 0 && epoch != epochs {
                let path = dir.join(format!("epoch{epoch:05}.ckpt"));
                checkpoint::save(&path, g, &state)?;
                checkpoints.push(path);
            }
        }
    }
    let final_train_accuracy = evaluate(g, &state, train_ds, cfg.batch_size)?;
    let final_val_accuracy = history.last().and_then(|h| h.val_acc);
    if let Some(dir) = out_dir {
        write_history(dir.join("history.csv"), &history)?;
        let path = dir.join(FINAL_CHECKPOINT);
        checkpoint::save(&path, g, &state)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        state,
        history,
        checkpoints,
        final_train_accuracy,
        final_val_accuracy,
        steps: step,
        epochs,
        max_lr,
    })
}
