//! Grid runner: one independent, resumable run directory per `(r, ipc, seed)` cell.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use mnlab::arch::ArchGraph;
use mnlab::audit::{audit, AuditOptions, MacConvention};
use mnlab::data::{apply_indices, read_indices, subsample_indices, write_indices, Dataset, Standardizer};
use mnlab::diagnostics::diagnose;
use mnlab::engine::ModelState;
use mnlab::trainer::{evaluate, train, TrainConfig};
use mnlab::transform::mn_transform;
use mnlab::{DType, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{LoadedData, SweepConfig};

/// Marker written last in a cell directory; its presence means the cell is complete.
pub const DONE_MARKER: &str = "done";
pub const RESULT_FILE: &str = "result.json";
pub const CELL_FILE: &str = "cell.json";
pub const CELLS_DIR: &str = "cells";

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{failed} of {total} cells failed: {summary}")]
    CellsFailed {
        failed: usize,
        total: usize,
        summary: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub r: usize,
    pub ipc: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!("r{}_ipc{}_seed{}", self.r, self.ipc, self.seed)
    }
}

/// Outcome of one completed cell, stored as `result.json` in its run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: String,
    pub r: usize,
    pub ipc: usize,
    pub seed: u64,
    #[serde(rename = "M")]
    pub paths: usize,
    pub test_accuracy: f64,
    pub final_train_accuracy: f64,
    pub oracle_accuracy: f64,
    pub per_path_accuracy: Vec<f64>,
    pub params: u64,
    /// Evaluation-convention MACs for one sample at the data resolution.
    pub macs: u64,
    pub macs_train: u64,
    pub activation_elements: u64,
    pub epochs: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub max_lr: f64,
}

/// Snapshot written before training so every run directory is self-describing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSnapshot {
    pub cell: CellKey,
    pub graph_builder: crate::config::GraphSpec,
    pub transform: crate::config::TransformOptions,
    pub train: TrainConfig,
    pub indices_file: PathBuf,
    pub train_source: String,
    pub test_source: String,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    /// Results of every completed cell, whether run now or earlier.
    pub results: Vec<CellResult>,
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<(String, String)>,
}

impl SweepOutcome {
    pub fn into_result(self) -> Result<SweepOutcome, SweepError> {
        if self.failures.is_empty() {
            return Ok(self);
        }
        let total = self.results.len() + self.failures.len();
        let summary = self
            .failures
            .iter()
            .map(|(c, e)| format!("{c}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(SweepError::CellsFailed {
            failed: self.failures.len(),
            total,
            summary,
        })
    }
}

pub fn cells(cfg: &SweepConfig) -> Vec<CellKey> {
    let mut out = Vec::new();
    for &ipc in &cfg.ipc_grid {
        for seed in 0..cfg.seeds {
            for &r in &cfg.r_grid {
                out.push(CellKey { r, ipc, seed });
            }
        }
    }
    out
}

pub fn cell_dir(out: &Path, key: &CellKey) -> PathBuf {
    out.join(CELLS_DIR).join(key.id())
}

fn indices_path(out: &Path, ipc: usize, seed: u64) -> PathBuf {
    out.join("indices").join(format!("ipc{ipc}_seed{seed}.idx"))
}

pub fn read_result(dir: &Path) -> anyhow::Result<Option<CellResult>> {
    if !dir.join(DONE_MARKER).exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(dir.join(RESULT_FILE))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// A cell's result and whether it was computed in this invocation, or the failure message.
type CellRun = Result<(CellResult, bool), String>;

/// Runs every cell not already completed, continuing past failures.
///
/// One index file per `(ipc, seed)` is written up front and shared by all `r`.
pub fn run_sweep(cfg: &SweepConfig) -> anyhow::Result<SweepOutcome> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out.join(CELLS_DIR))?;
    std::fs::create_dir_all(out.join("indices"))?;
    std::fs::write(out.join("sweep_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let baseline = cfg.graph.build()?;
    let data = cfg.data.load()?;
    anyhow::ensure!(data.test.is_some(), "a sweep needs a test split");
    anyhow::ensure!(
        data.train.class_count == baseline.num_classes(),
        "data has {} classes, graph has {}",
        data.train.class_count,
        baseline.num_classes()
    );
    for &ipc in &cfg.ipc_grid {
        for seed in 0..cfg.seeds {
            let path = indices_path(out, ipc, seed);
            if !path.exists() {
                let idx = subsample_indices(&data.train.labels, data.train.class_count, ipc, seed)?;
                write_indices(&path, &idx)?;
            }
        }
    }
    let keys = cells(cfg);
    let parallelism = if crate::deterministic_mode() {
        1
    } else {
        cfg.parallelism.max(1)
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallelism).build()?;
    let outcomes: Vec<(CellKey, CellRun)> = pool.install(|| {
        keys.par_iter()
            .map(|key| {
                let res = catch_unwind(AssertUnwindSafe(|| run_cell(cfg, &baseline, &data, key)));
                let res = match res {
                    Ok(Ok(v)) => Ok(v),
                    Ok(Err(e)) => Err(format!("{e:#}")),
                    Err(panic) => Err(panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_else(|| "panic".into())),
                };
                (*key, res)
            })
            .collect()
    });
    let mut outcome = SweepOutcome::default();
    for (key, res) in outcomes {
        match res {
            Ok((result, fresh)) => {
                if fresh {
                    outcome.ran.push(key.id());
                } else {
                    outcome.skipped.push(key.id());
                }
                outcome.results.push(result);
            }
            Err(e) => outcome.failures.push((key.id(), e)),
        }
    }
    let failures: Vec<_> = outcome
        .failures
        .iter()
        .map(|(c, e)| serde_json::json!({"cell": c, "error": e}))
        .collect();
    std::fs::write(
        out.join("failures.json"),
        serde_json::to_string_pretty(&failures)? + "\n",
    )?;
    Ok(outcome)
}

/// Returns the cell result and whether it was computed now.
fn run_cell(
    cfg: &SweepConfig,
    baseline: &ArchGraph,
    data: &LoadedData,
    key: &CellKey,
) -> anyhow::Result<(CellResult, bool)> {
    let dir = cell_dir(&cfg.output_dir, key);
    if let Some(done) = read_result(&dir)? {
        return Ok((done, false));
    }
    std::fs::create_dir_all(&dir)?;
    let idx_file = indices_path(&cfg.output_dir, key.ipc, key.seed);
    let idx = read_indices(&idx_file)?;
    let mut train_ds = apply_indices(&data.train, &idx)?;
    train_ds.ipc = Some(key.ipc);
    let mut test_ds = data.evaluation().clone();
    let standardizer = Standardizer::fit(&train_ds);
    standardizer.apply(&mut train_ds);
    standardizer.apply(&mut test_ds);
    std::fs::write(
        dir.join("standardizer.json"),
        serde_json::to_string_pretty(&standardizer)? + "\n",
    )?;

    let g = mn_transform(baseline, &cfg.transform.for_r(key.r))?;
    g.save(dir.join("graph.json"))?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = key.seed;
    let snapshot = CellSnapshot {
        cell: *key,
        graph_builder: cfg.graph.clone(),
        transform: cfg.transform,
        train: train_cfg.clone(),
        indices_file: idx_file,
        train_source: data.train.provenance.source.clone(),
        test_source: test_ds.provenance.source.clone(),
        train_samples: train_ds.len(),
        test_samples: test_ds.len(),
    };
    std::fs::write(dir.join(CELL_FILE), serde_json::to_string_pretty(&snapshot)? + "\n")?;

    let (h, w) = train_ds.resolution();
    let opts = |convention| AuditOptions {
        height: h,
        width: w,
        batch_size: 1,
        convention,
        ..AuditOptions::default()
    };
    let eval_audit = audit(&g, &opts(MacConvention::Eval))?;
    let train_audit = audit(&g, &opts(MacConvention::Train))?;
    std::fs::write(
        dir.join("audit.json"),
        serde_json::to_string_pretty(&eval_audit)? + "\n",
    )?;

    let partial = match train_cfg.precision {
        DType::F32 => train_and_diagnose::<f32>(cfg, &g, &train_ds, &test_ds, &train_cfg, &dir)?,
        DType::F64 => train_and_diagnose::<f64>(cfg, &g, &train_ds, &test_ds, &train_cfg, &dir)?,
    };
    let result = CellResult {
        cell: key.id(),
        r: key.r,
        ipc: key.ipc,
        seed: key.seed,
        paths: g.path_multiplicity,
        params: eval_audit.total_params,
        macs: eval_audit.total_macs_per_batch,
        macs_train: train_audit.total_macs_per_batch,
        activation_elements: eval_audit.activation_elements,
        batch_size: train_cfg.batch_size.min(train_ds.len()),
        ..partial
    };
    std::fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(&result)? + "\n")?;
    std::fs::write(dir.join(DONE_MARKER), "")?;
    Ok((result, true))
}

fn train_and_diagnose<T: Scalar>(
    cfg: &SweepConfig,
    g: &ArchGraph,
    train_ds: &Dataset,
    test_ds: &Dataset,
    train_cfg: &TrainConfig,
    dir: &Path,
) -> anyhow::Result<CellResult> {
    let val = cfg.track_val.then_some(test_ds);
    let outcome = train::<T>(g, train_ds, val, train_cfg, Some(dir))?;
    let state: &ModelState<T> = &outcome.state;
    let test_accuracy = evaluate(g, state, test_ds, cfg.eval_batch)?;
    let report = diagnose(g, state, test_ds, &cfg.diagnostics, cfg.eval_batch)?;
    report.write(dir)?;
    Ok(CellResult {
        cell: String::new(),
        r: g.r,
        ipc: 0,
        seed: 0,
        paths: g.path_multiplicity,
        test_accuracy,
        final_train_accuracy: outcome.final_train_accuracy,
        oracle_accuracy: report.oracle_accuracy,
        per_path_accuracy: report.per_path_accuracy,
        params: 0,
        macs: 0,
        macs_train: 0,
        activation_elements: 0,
        epochs: outcome.epochs,
        steps: outcome.steps,
        batch_size: 0,
        max_lr: outcome.max_lr,
    })
}
