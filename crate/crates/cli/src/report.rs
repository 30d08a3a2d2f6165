//! Report emission from completed run directories, and schema checks for the emitted files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sweep::{read_result, CellResult, CELLS_DIR};

pub const REPORT_DIR: &str = "report";
pub const ACCURACY_MATRIX: &str = "accuracy_matrix.csv";
pub const ACCURACY_MATRIX_NORMALIZED: &str = "accuracy_matrix_normalized.csv";
pub const GAIN_MATRIX: &str = "gain_matrix.csv";
pub const COST_TABLE: &str = "cost_table.csv";
pub const RESULTS_TABLE: &str = "results_table.csv";
pub const SUMMARY: &str = "summary.json";

pub const RESULTS_COLUMNS: [&str; 9] = [
    "cell",
    "r",
    "ipc",
    "seed",
    "test_accuracy",
    "gain_vs_r1",
    "oracle_accuracy",
    "params",
    "macs",
];
pub const COST_COLUMNS: [&str; 9] = [
    "r",
    "M",
    "params",
    "params_m",
    "macs_eval",
    "macs_train",
    "activation_elements",
    "macs_eval_batch_g",
    "cell",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no completed cells under {0}")]
    Empty(PathBuf),
    #[error("schema violations:\n{}", .0.join("\n"))]
    Schema(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Other(String),
}

/// Mean and spread of one `(r, ipc)` cell over its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellAggregate {
    pub r: usize,
    pub ipc: usize,
    pub seeds: usize,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std_test_accuracy: f64,
    pub mean_oracle_accuracy: f64,
    pub mean_gain_vs_r1: Option<f64>,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryCell {
    pub cell: String,
    pub run_dir: String,
    pub r: usize,
    pub ipc: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub gain_vs_r1: Option<f64>,
    pub oracle_accuracy: f64,
    pub final_train_accuracy: f64,
    pub per_path_accuracy: Vec<f64>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub r_values: Vec<usize>,
    pub ipc_values: Vec<usize>,
    /// Axis along which `accuracy_matrix_normalized.csv` is min-max scaled.
    pub normalization: String,
    pub cost_batch: u64,
    pub cells: Vec<SummaryCell>,
    pub aggregates: Vec<CellAggregate>,
    pub files: Vec<String>,
}

/// Min-max scales each row; rows with a single distinct value map to 1.
pub fn minmax_rows(matrix: &[Vec<Option<f64>>]) -> Vec<Vec<Option<f64>>> {
    matrix
        .iter()
        .map(|row| {
            let present: Vec<f64> = row.iter().flatten().copied().collect();
            let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter()
                .map(|v| v.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 }))
                .collect()
        })
        .collect()
}

/// Min-max scales each column; columns with a single distinct value map to 1.
pub fn minmax_columns(matrix: &[Vec<Option<f64>>]) -> Vec<Vec<Option<f64>>> {
    let cols = matrix.first().map_or(0, Vec::len);
    let transposed: Vec<Vec<Option<f64>>> = (0..cols).map(|c| matrix.iter().map(|r| r[c]).collect()).collect();
    let scaled = minmax_rows(&transposed);
    (0..matrix.len())
        .map(|r| (0..cols).map(|c| scaled[c][r]).collect())
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_matrix(
    path: &Path,
    r_values: &[usize],
    ipc_values: &[usize],
    m: &[Vec<Option<f64>>],
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["ipc".to_string()];
    header.extend(r_values.iter().map(|r| format!("r={r}")));
    w.write_record(&header)?;
    for (ipc, row) in ipc_values.iter().zip(m) {
        let mut rec = vec![ipc.to_string()];
        rec.extend(row.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Completed cell results under `results_dir/cells`, in directory-name order.
pub fn collect_results(results_dir: &Path) -> Result<Vec<CellResult>, ReportError> {
    let cells = results_dir.join(CELLS_DIR);
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(&cells) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect(),
        Err(_) => Vec::new(),
    };
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        if let Some(r) = read_result(&d).map_err(|e| ReportError::Other(format!("{}: {e:#}", d.display())))? {
            out.push(r);
        }
    }
    Ok(out)
}

/// Writes the report files into `results_dir/report` and returns their paths.
///
/// Output depends only on the completed run directories, so re-emitting
/// from unchanged inputs is byte-identical.
pub fn emit_report(results_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut results = collect_results(results_dir)?;
    if results.is_empty() {
        return Err(ReportError::Empty(results_dir.to_path_buf()));
    }
    results.sort_by(|a, b| (b.ipc, a.r, a.seed).cmp(&(a.ipc, b.r, b.seed)));
    let cost_batch = std::fs::read_to_string(results_dir.join("sweep_config.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("cost_batch").and_then(|b| b.as_u64()))
        .unwrap_or(128);
    let r_values: Vec<usize> = results
        .iter()
        .map(|c| c.r)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ipc_values: Vec<usize> = results
        .iter()
        .map(|c| c.ipc)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .rev()
        .collect();

    let mut by_cell: BTreeMap<(usize, usize), Vec<&CellResult>> = BTreeMap::new();
    for c in &results {
        by_cell.entry((c.r, c.ipc)).or_default().push(c);
    }
    let mean_acc = |r: usize, ipc: usize| {
        by_cell
            .get(&(r, ipc))
            .map(|cs| mean(&cs.iter().map(|c| c.test_accuracy).collect::<Vec<_>>()))
    };
    let gain = |c: &CellResult| mean_acc(1, c.ipc).map(|base| c.test_accuracy - base);

    let out = results_dir.join(REPORT_DIR);
    std::fs::create_dir_all(&out)?;

    let mut w = csv::Writer::from_path(out.join(RESULTS_TABLE))?;
    w.write_record(RESULTS_COLUMNS)?;
    for c in &results {
        w.write_record([
            c.cell.clone(),
            c.r.to_string(),
            c.ipc.to_string(),
            c.seed.to_string(),
            c.test_accuracy.to_string(),
            fmt(gain(c)),
            c.oracle_accuracy.to_string(),
            c.params.to_string(),
            c.macs.to_string(),
        ])?;
    }
    w.flush()?;

    let acc: Vec<Vec<Option<f64>>> = ipc_values
        .iter()
        .map(|&ipc| r_values.iter().map(|&r| mean_acc(r, ipc)).collect())
        .collect();
    let gains: Vec<Vec<Option<f64>>> = ipc_values
        .iter()
        .map(|&ipc| {
            r_values
                .iter()
                .map(|&r| Some(mean_acc(r, ipc)? - mean_acc(1, ipc)?))
                .collect()
        })
        .collect();
    write_matrix(&out.join(ACCURACY_MATRIX), &r_values, &ipc_values, &acc)?;
    write_matrix(
        &out.join(ACCURACY_MATRIX_NORMALIZED),
        &r_values,
        &ipc_values,
        &minmax_rows(&acc),
    )?;
    write_matrix(&out.join(GAIN_MATRIX), &r_values, &ipc_values, &gains)?;

    let mut w = csv::Writer::from_path(out.join(COST_TABLE))?;
    w.write_record(COST_COLUMNS)?;
    for &r in &r_values {
        let c = results
            .iter()
            .filter(|c| c.r == r)
            .min_by(|a, b| a.cell.cmp(&b.cell))
            .expect("r from results");
        w.write_record([
            r.to_string(),
            c.paths.to_string(),
            c.params.to_string(),
            (c.params as f64 / 1e6).to_string(),
            c.macs.to_string(),
            c.macs_train.to_string(),
            c.activation_elements.to_string(),
            ((c.macs * cost_batch) as f64 / 1e9).to_string(),
            c.cell.clone(),
        ])?;
    }
    w.flush()?;

    let aggregates = by_cell
        .iter()
        .map(|(&(r, ipc), cs)| {
            let accs: Vec<f64> = cs.iter().map(|c| c.test_accuracy).collect();
            let gains: Vec<f64> = cs.iter().filter_map(|c| gain(c)).collect();
            CellAggregate {
                r,
                ipc,
                seeds: cs.len(),
                mean_test_accuracy: mean(&accs),
                std_test_accuracy: sample_std(&accs),
                mean_oracle_accuracy: mean(&cs.iter().map(|c| c.oracle_accuracy).collect::<Vec<_>>()),
                mean_gain_vs_r1: (!gains.is_empty()).then(|| mean(&gains)),
                cells: cs.iter().map(|c| c.cell.clone()).collect(),
            }
        })
        .collect();
    let files = [
        RESULTS_TABLE,
        ACCURACY_MATRIX,
        ACCURACY_MATRIX_NORMALIZED,
        GAIN_MATRIX,
        COST_TABLE,
        SUMMARY,
    ];
    let summary = Summary {
        r_values: r_values.clone(),
        ipc_values: ipc_values.clone(),
        normalization: "min-max within each ipc row".into(),
        cost_batch,
        cells: results
            .iter()
            .map(|c| SummaryCell {
                cell: c.cell.clone(),
                run_dir: format!("{CELLS_DIR}/{}", c.cell),
                r: c.r,
                ipc: c.ipc,
                seed: c.seed,
                test_accuracy: c.test_accuracy,
                gain_vs_r1: gain(c),
                oracle_accuracy: c.oracle_accuracy,
                final_train_accuracy: c.final_train_accuracy,
                per_path_accuracy: c.per_path_accuracy.clone(),
                params: c.params,
                macs: c.macs,
            })
            .collect(),
        aggregates,
        files: files.iter().map(|f| f.to_string()).collect(),
    };
    std::fs::write(out.join(SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(files.iter().map(|f| out.join(f)).collect())
}

#[derive(Clone, Copy)]
enum Field {
    Text,
    Uint,
    /// Probability-like value in `[0, 1]`.
    Unit,
    /// Any finite number, possibly empty.
    OptNum,
    /// `[0, 1]` or empty.
    OptUnit,
    Num,
}

fn check_field(kind: Field, v: &str) -> Result<(), String> {
    let num = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite());
    let unit = |x: f64| (0.0..=1.0).contains(&x);
    let ok = match kind {
        Field::Text => !v.is_empty(),
        Field::Uint => v.parse::<u64>().is_ok(),
        Field::Num => num(v).is_some(),
        Field::Unit => num(v).is_some_and(unit),
        Field::OptNum => v.is_empty() || num(v).is_some(),
        Field::OptUnit => v.is_empty() || num(v).is_some_and(unit),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("bad value `{v}`"))
    }
}

fn check_csv(path: &Path, header: &[String], fields: &[Field], errors: &mut Vec<String>) -> usize {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let mut rdr = match csv::ReaderBuilder::new().has_headers(true).from_path(path) {
        Ok(r) => r,
        Err(e) => {
            errors.push(format!("{name}: {e}"));
            return 0;
        }
    };
    match rdr.headers() {
        Ok(h) if h.iter().eq(header.iter().map(String::as_str)) => {}
        Ok(h) => errors.push(format!(
            "{name}: header {:?}, expected {header:?}",
            h.iter().collect::<Vec<_>>()
        )),
        Err(e) => errors.push(format!("{name}: {e}")),
    }
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        rows += 1;
        match rec {
            Ok(rec) => {
                if rec.len() != fields.len() {
                    errors.push(format!(
                        "{name} row {}: {} fields, expected {}",
                        i + 1,
                        rec.len(),
                        fields.len()
                    ));
                    continue;
                }
                for ((v, &f), col) in rec.iter().zip(fields).zip(header) {
                    if let Err(e) = check_field(f, v) {
                        errors.push(format!("{name} row {} column {col}: {e}", i + 1));
                    }
                }
            }
            Err(e) => errors.push(format!("{name} row {}: {e}", i + 1)),
        }
    }
    rows
}

/// Checks every report file in `results_dir/report` against its schema.
pub fn validate_report(results_dir: &Path) -> Result<Summary, ReportError> {
    let out = results_dir.join(REPORT_DIR);
    let mut errors = Vec::new();
    let summary: Summary = match std::fs::read_to_string(out.join(SUMMARY)) {
        Ok(t) => match serde_json::from_str(&t) {
            Ok(s) => s,
            Err(e) => return Err(ReportError::Schema(vec![format!("{SUMMARY}: {e}")])),
        },
        Err(e) => return Err(ReportError::Schema(vec![format!("{SUMMARY}: {e}")])),
    };
    for c in &summary.cells {
        if !results_dir.join(&c.run_dir).join(crate::sweep::RESULT_FILE).exists() {
            errors.push(format!("{SUMMARY}: cell {} has no run directory {}", c.cell, c.run_dir));
        }
        if !(0.0..=1.0).contains(&c.test_accuracy) || !(0.0..=1.0).contains(&c.oracle_accuracy) {
            errors.push(format!("{SUMMARY}: cell {} accuracy out of range", c.cell));
        }
    }
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let rows = check_csv(
        &out.join(RESULTS_TABLE),
        &s(&RESULTS_COLUMNS),
        &[
            Field::Text,
            Field::Uint,
            Field::Uint,
            Field::Uint,
            Field::Unit,
            Field::OptNum,
            Field::Unit,
            Field::Uint,
            Field::Uint,
        ],
        &mut errors,
    );
    if rows != summary.cells.len() {
        errors.push(format!(
            "{RESULTS_TABLE}: {rows} rows for {} cells",
            summary.cells.len()
        ));
    }
    let mut matrix_header = vec!["ipc".to_string()];
    matrix_header.extend(summary.r_values.iter().map(|r| format!("r={r}")));
    for (file, kind) in [
        (ACCURACY_MATRIX, Field::OptUnit),
        (ACCURACY_MATRIX_NORMALIZED, Field::OptUnit),
        (GAIN_MATRIX, Field::OptNum),
    ] {
        let mut fields = vec![Field::Uint];
        fields.extend(std::iter::repeat_n(kind, summary.r_values.len()));
        let rows = check_csv(&out.join(file), &matrix_header, &fields, &mut errors);
        if rows != summary.ipc_values.len() {
            errors.push(format!(
                "{file}: {rows} rows for {} ipc values",
                summary.ipc_values.len()
            ));
        }
    }
    let rows = check_csv(
        &out.join(COST_TABLE),
        &s(&COST_COLUMNS),
        &[
            Field::Uint,
            Field::Uint,
            Field::Uint,
            Field::Num,
            Field::Uint,
            Field::Uint,
            Field::Uint,
            Field::Num,
            Field::Text,
        ],
        &mut errors,
    );
    if rows != summary.r_values.len() {
        errors.push(format!(
            "{COST_TABLE}: {rows} rows for {} r values",
            summary.r_values.len()
        ));
    }
    if errors.is_empty() {
        Ok(summary)
    } else {
        Err(ReportError::Schema(errors))
    }
}
