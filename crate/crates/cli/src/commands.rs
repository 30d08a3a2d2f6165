//! One job description and runner per CLI subcommand.
//!
//! Every job is a JSON document; the binary loads it from `--config` and
//! lets individual flags override fields.

use std::path::{Path, PathBuf};

use mnlab::arch::ArchGraph;
use mnlab::audit::{
    audit, param_sweep, preservation_report, AuditOptions, AuditReport, ParamSweepRow, PreservationEntry,
};
use mnlab::data::{
    apply_indices, encode_cifar, read_indices, subsample_indices, synth_dataset, write_indices, CifarVariant, Dataset,
    Standardizer, SynthSpec,
};
use mnlab::diagnostics::{diagnose, CkaOptions, DiagnosticsReport};
use mnlab::engine::checkpoint;
use mnlab::trainer::{evaluate, train, TrainConfig, FINAL_CHECKPOINT};
use mnlab::transform::mn_transform;
use mnlab::{DType, Scalar};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{load_graph, DataSource, TransformOptions};

pub const STANDARDIZER_FILE: &str = "standardizer.json";

pub fn load_job<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformJob {
    /// Graph file or graph builder spec.
    pub graph: PathBuf,
    pub r: usize,
    #[serde(default)]
    pub transform: TransformOptions,
    pub output: PathBuf,
}

pub fn run_transform(job: &TransformJob) -> anyhow::Result<ArchGraph> {
    let g = mn_transform(&load_graph(&job.graph)?, &job.transform.for_r(job.r))?;
    g.save(&job.output)?;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditJob {
    pub graph: PathBuf,
    #[serde(default)]
    pub options: AuditOptions,
    /// Baseline graph; enables per-layer preservation classification.
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    /// Widening factors for a parameter sweep of `graph` (taken as the baseline).
    #[serde(default)]
    pub sweep_r: Vec<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub report: AuditReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preservation: Option<Vec<PreservationEntry>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub param_sweep: Vec<ParamSweepRow>,
}

pub fn run_audit(job: &AuditJob) -> anyhow::Result<AuditOutput> {
    let g = load_graph(&job.graph)?;
    let mut report = audit(&g, &job.options)?;
    let preservation = match &job.baseline {
        Some(path) => {
            let base = audit(&load_graph(path)?, &job.options)?;
            report.attach_baseline(&base);
            Some(preservation_report(&base, &report)?)
        }
        None => None,
    };
    let param_sweep = if job.sweep_r.is_empty() {
        Vec::new()
    } else {
        param_sweep(&g, &job.sweep_r)?
    };
    let out = AuditOutput {
        report,
        preservation,
        param_sweep,
    };
    if let Some(path) = &job.output {
        write_json(path, &out)?;
        if !out.param_sweep.is_empty() {
            write_param_sweep_csv(&path.with_extension("csv"), &out.param_sweep)?;
        }
    }
    Ok(out)
}

/// One row per widening factor: `r, params, params_m, gain_percent, gain_percent_rounded`.
pub fn write_param_sweep_csv(path: &Path, rows: &[ParamSweepRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["r", "params", "params_m", "gain_percent", "gain_percent_rounded"])?;
    for row in rows {
        w.write_record([
            row.r.to_string(),
            row.params.to_string(),
            row.params_m.to_string(),
            row.gain_percent.to_string(),
            row.gain_percent_rounded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleJob {
    pub data: DataSource,
    pub ipc: usize,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
}

pub fn run_subsample(job: &SubsampleJob) -> anyhow::Result<Vec<usize>> {
    let data = job.data.load()?;
    let idx = subsample_indices(&data.train.labels, data.train.class_count, job.ipc, job.seed)?;
    write_indices(&job.output, &idx)?;
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub spec: SynthSpec,
    #[serde(default)]
    pub seed: u64,
    pub variant: CifarVariant,
    /// CIFAR-format binary file to write.
    pub output: PathBuf,
}

pub fn run_synth(job: &SynthJob) -> anyhow::Result<Dataset> {
    let ds = synth_dataset(&job.spec, job.seed)?;
    if let Some(parent) = job.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&job.output, encode_cifar(&ds, job.variant)?)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub graph: PathBuf,
    #[serde(default = "one")]
    pub r: usize,
    #[serde(default)]
    pub transform: TransformOptions,
    pub data: DataSource,
    /// Images per class; the whole training split when absent.
    #[serde(default)]
    pub ipc: Option<usize>,
    /// Index file overriding `ipc` subsampling.
    #[serde(default)]
    pub indices: Option<PathBuf>,
    /// Seed of the subsample; defaults to the training seed.
    #[serde(default)]
    pub subsample_seed: Option<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default)]
    pub track_val: bool,
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn default_eval_batch() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub r: usize,
    #[serde(rename = "M")]
    pub paths: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub steps: u64,
    pub max_lr: f64,
    pub final_train_accuracy: f64,
    /// Absent when the data source has no test split.
    pub test_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn run_train(job: &TrainJob) -> anyhow::Result<TrainSummary> {
    let data = job.data.load()?;
    let mut train_ds = match (&job.indices, job.ipc) {
        (Some(path), _) => apply_indices(&data.train, &read_indices(path)?)?,
        (None, Some(ipc)) => {
            let seed = job.subsample_seed.unwrap_or(job.train.seed);
            apply_indices(
                &data.train,
                &subsample_indices(&data.train.labels, data.train.class_count, ipc, seed)?,
            )?
        }
        (None, None) => data.train.clone(),
    };
    let mut test_ds = data.test;
    let standardizer = Standardizer::fit(&train_ds);
    standardizer.apply(&mut train_ds);
    if let Some(t) = test_ds.as_mut() {
        standardizer.apply(t);
    }
    std::fs::create_dir_all(&job.output_dir)?;
    write_json(&job.output_dir.join("train_job.json"), job)?;
    write_json(&job.output_dir.join(STANDARDIZER_FILE), &standardizer)?;
    let g = mn_transform(&load_graph(&job.graph)?, &job.transform.for_r(job.r))?;
    g.save(job.output_dir.join("graph.json"))?;
    let summary = match job.train.precision {
        DType::F32 => train_typed::<f32>(job, &g, &train_ds, test_ds.as_ref())?,
        DType::F64 => train_typed::<f64>(job, &g, &train_ds, test_ds.as_ref())?,
    };
    write_json(&job.output_dir.join("train_summary.json"), &summary)?;
    Ok(summary)
}

fn train_typed<T: Scalar>(
    job: &TrainJob,
    g: &ArchGraph,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
) -> anyhow::Result<TrainSummary> {
    let val = test_ds.filter(|_| job.track_val);
    let outcome = train::<T>(g, train_ds, val, &job.train, Some(&job.output_dir))?;
    Ok(TrainSummary {
        r: g.r,
        paths: g.path_multiplicity,
        train_samples: train_ds.len(),
        test_samples: test_ds.map_or(0, Dataset::len),
        epochs: outcome.epochs,
        steps: outcome.steps,
        max_lr: outcome.max_lr,
        final_train_accuracy: outcome.final_train_accuracy,
        test_accuracy: test_ds
            .map(|t| evaluate(g, &outcome.state, t, job.eval_batch))
            .transpose()?,
        checkpoint: job.output_dir.join(FINAL_CHECKPOINT),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseJob {
    /// Checkpoint file; defaults to the final checkpoint of `run`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Run directory written by `train`.
    #[serde(default)]
    pub run: Option<PathBuf>,
    /// Evaluated on its test split, or on its training file when there is none.
    pub data: DataSource,
    /// Input standardization; defaults to `standardizer.json` beside the checkpoint.
    #[serde(default)]
    pub standardizer: Option<PathBuf>,
    #[serde(default)]
    pub diagnostics: CkaOptions,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    pub output_dir: PathBuf,
}

impl DiagnoseJob {
    pub fn checkpoint_path(&self) -> anyhow::Result<PathBuf> {
        match (&self.checkpoint, &self.run) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some(run)) => Ok(run.join(FINAL_CHECKPOINT)),
            (None, None) => anyhow::bail!("diagnose needs a checkpoint or a run directory"),
        }
    }
}

pub fn run_diagnose(job: &DiagnoseJob) -> anyhow::Result<DiagnosticsReport> {
    let ckpt = job.checkpoint_path()?;
    let mut ds = job.data.load()?.evaluation().clone();
    let std_path = job.standardizer.clone().or_else(|| {
        let p = ckpt.parent()?.join(STANDARDIZER_FILE);
        p.exists().then_some(p)
    });
    if let Some(path) = std_path {
        load_job::<Standardizer>(&path)?.apply(&mut ds);
    }
    let report = match checkpoint::stored_dtype(&ckpt)? {
        DType::F32 => diagnose_typed::<f32>(job, &ckpt, &ds)?,
        DType::F64 => diagnose_typed::<f64>(job, &ckpt, &ds)?,
    };
    report.write(&job.output_dir)?;
    Ok(report)
}

fn diagnose_typed<T: Scalar>(job: &DiagnoseJob, ckpt: &Path, ds: &Dataset) -> anyhow::Result<DiagnosticsReport> {
    let (g, state) = checkpoint::load::<T>(ckpt)?;
    Ok(diagnose(&g, &state, ds, &job.diagnostics, job.eval_batch)?)
}
