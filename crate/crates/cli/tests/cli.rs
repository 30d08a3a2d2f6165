use std::path::Path;
use std::process::Command;

use mnlab::build_micro_cnn;
use mnlab::transform::{mn_transform, TransformConfig};
use mnlab_cli::report::{self, minmax_rows, REPORT_DIR};
use mnlab_cli::sweep::{cell_dir, CellKey, CellResult, DONE_MARKER, RESULT_FILE};
use mnlab_cli::{emit_report, run_sweep, validate_report, SweepConfig};
use serde_json::json;

fn tiny_sweep(out: &Path, r_grid: &[usize], ipc_grid: &[usize], seeds: u64) -> SweepConfig {
    serde_json::from_value(json!({
        "graph": {"builder": "micro_cnn", "widths": [8, 16], "classes": 4},
        "r_grid": r_grid,
        "ipc_grid": ipc_grid,
        "seeds": seeds,
        "data": {"kind": "synthetic", "classes": 4, "train_per_class": 8, "test_per_class": 4,
                 "height": 8, "width": 8, "noise": 0.1},
        "train": {"batch_size": 16, "max_lr": 0.01, "epochs": 3, "augmentation": null},
        "output_dir": out,
    }))
    .unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

fn fake_cell(out: &Path, r: usize, ipc: usize, seed: u64, acc: f64) {
    let key = CellKey { r, ipc, seed };
    let dir = cell_dir(out, &key);
    std::fs::create_dir_all(&dir).unwrap();
    let m = r * r;
    let result = CellResult {
        cell: key.id(),
        r,
        ipc,
        seed,
        paths: m,
        test_accuracy: acc,
        final_train_accuracy: 1.0,
        oracle_accuracy: acc,
        per_path_accuracy: vec![acc; m],
        params: 1000 * r as u64,
        macs: 5000 * r as u64,
        macs_train: 6000 * r as u64,
        activation_elements: 100,
        epochs: 1,
        steps: 1,
        batch_size: 1,
        max_lr: 1e-3,
    };
    std::fs::write(dir.join(RESULT_FILE), serde_json::to_string(&result).unwrap()).unwrap();
    std::fs::write(dir.join(DONE_MARKER), "").unwrap();
}

#[test]
fn single_cell_sweep_reports_degenerate_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_sweep(tmp.path(), &[1], &[8], 1);
    let outcome = run_sweep(&cfg).unwrap().into_result().unwrap();
    assert_eq!(outcome.ran, vec!["r1_ipc8_seed0".to_string()]);
    emit_report(tmp.path()).unwrap();
    let summary = validate_report(tmp.path()).unwrap();
    assert_eq!(summary.cells.len(), 1);
    let rep = tmp.path().join(REPORT_DIR);
    assert_eq!(csv_rows(rep.join("accuracy_matrix_normalized.csv"))[1], vec!["8", "1"]);
    assert_eq!(csv_rows(rep.join("gain_matrix.csv"))[1], vec!["8", "0"]);
    let dir = tmp.path().join("cells/r1_ipc8_seed0");
    for f in [
        "cell.json",
        "graph.json",
        "audit.json",
        "history.csv",
        "final.ckpt",
        "diag.json",
        "result.json",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn rerun_skips_completed_cells_and_report_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_sweep(tmp.path(), &[1, 2], &[4], 1);
    let first = run_sweep(&cfg).unwrap();
    assert_eq!(first.ran.len(), 2);
    emit_report(tmp.path()).unwrap();
    let rep = tmp.path().join(REPORT_DIR);
    let files = [
        report::RESULTS_TABLE,
        report::ACCURACY_MATRIX,
        report::ACCURACY_MATRIX_NORMALIZED,
        report::GAIN_MATRIX,
        report::COST_TABLE,
        report::SUMMARY,
    ];
    let before: Vec<String> = files.iter().map(|f| read(rep.join(f))).collect();
    let history = read(tmp.path().join("cells/r2_ipc4_seed0/history.csv"));

    let second = run_sweep(&cfg).unwrap();
    assert!(second.ran.is_empty());
    assert_eq!(second.skipped.len(), 2);
    assert_eq!(second.results, first.results);
    assert_eq!(read(tmp.path().join("cells/r2_ipc4_seed0/history.csv")), history);
    emit_report(tmp.path()).unwrap();
    let after: Vec<String> = files.iter().map(|f| read(rep.join(f))).collect();
    assert_eq!(before, after);
}

#[test]
fn shared_subsample_and_independent_param_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_sweep(tmp.path(), &[1, 2], &[4], 1);
    let outcome = run_sweep(&cfg).unwrap().into_result().unwrap();
    let base = build_micro_cnn(&[8, 16], 4);
    for res in &outcome.results {
        let g = mn_transform(&base, &TransformConfig::new(res.r)).unwrap();
        assert_eq!(res.params, mnlab::count_params(&g).unwrap().total_params);
        assert_eq!(res.per_path_accuracy.len(), res.r * res.r);
        assert!(res.oracle_accuracy >= res.per_path_accuracy.iter().copied().fold(0.0, f64::max));
    }
    let idx = read(tmp.path().join("indices/ipc4_seed0.idx"));
    for r in [1, 2] {
        let snap: serde_json::Value =
            serde_json::from_str(&read(tmp.path().join(format!("cells/r{r}_ipc4_seed0/cell.json")))).unwrap();
        assert_eq!(snap["train_samples"], 16);
        assert_eq!(read(snap["indices_file"].as_str().unwrap()), idx);
    }
}

#[test]
fn failing_cell_is_recorded_and_sweep_continues() {
    let tmp = tempfile::tempdir().unwrap();
    // 8 channels do not split into 3 equal slices.
    let cfg = tiny_sweep(tmp.path(), &[1, 3], &[4], 1);
    let outcome = run_sweep(&cfg).unwrap();
    assert_eq!(outcome.results.len(), 1);
    assert_eq!(outcome.failures.len(), 1);
    assert_eq!(outcome.failures[0].0, "r3_ipc4_seed0");
    let failures: serde_json::Value = serde_json::from_str(&read(tmp.path().join("failures.json"))).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert!(outcome.into_result().is_err());
    emit_report(tmp.path()).unwrap();
    validate_report(tmp.path()).unwrap();
}

#[test]
fn matrices_and_gains_from_known_cells() {
    let tmp = tempfile::tempdir().unwrap();
    // ipc 10: r=1 -> 0.4, r=2 -> 0.6 (mean of 0.5, 0.7), r=4 -> 0.5
    // ipc 5:  r=1 -> 0.2, r=2 -> 0.3, r=4 missing
    fake_cell(tmp.path(), 1, 10, 0, 0.4);
    fake_cell(tmp.path(), 2, 10, 0, 0.5);
    fake_cell(tmp.path(), 2, 10, 1, 0.7);
    fake_cell(tmp.path(), 4, 10, 0, 0.5);
    fake_cell(tmp.path(), 1, 5, 0, 0.2);
    fake_cell(tmp.path(), 2, 5, 0, 0.3);
    emit_report(tmp.path()).unwrap();
    let summary = validate_report(tmp.path()).unwrap();
    assert_eq!(summary.r_values, vec![1, 2, 4]);
    assert_eq!(summary.ipc_values, vec![10, 5]);
    let rep = tmp.path().join(REPORT_DIR);
    let num = |s: &str| s.parse::<f64>().unwrap();
    let acc = csv_rows(rep.join("accuracy_matrix.csv"));
    assert_eq!(acc[0], vec!["ipc", "r=1", "r=2", "r=4"]);
    assert!((num(&acc[1][2]) - 0.6).abs() < 1e-12);
    assert_eq!(acc[2][3], "");
    let norm = csv_rows(rep.join("accuracy_matrix_normalized.csv"));
    let expect = [[0.0, 1.0, 0.5], [0.0, 1.0, f64::NAN]];
    for (row, want) in norm[1..].iter().zip(expect) {
        for (cell, w) in row[1..].iter().zip(want) {
            if w.is_nan() {
                assert_eq!(cell, "");
            } else {
                assert!((num(cell) - w).abs() < 1e-12, "{cell} vs {w}");
            }
        }
    }
    let gain = csv_rows(rep.join("gain_matrix.csv"));
    assert_eq!(gain[1][1], "0");
    assert_eq!(gain[2][1], "0");
    assert!((num(&gain[1][2]) - 0.2).abs() < 1e-12);
    assert!((num(&gain[2][2]) - 0.1).abs() < 1e-12);
    let agg = summary.aggregates.iter().find(|a| a.r == 2 && a.ipc == 10).unwrap();
    assert!((agg.std_test_accuracy - 0.02f64.sqrt()).abs() < 1e-12);
    let hand = minmax_rows(&[vec![Some(0.4), Some(0.6), Some(0.5)]]);
    assert_eq!(hand[0][2], Some((0.5 - 0.4) / (0.6 - 0.4)));
}

#[test]
fn validation_rejects_corrupted_files() {
    let tmp = tempfile::tempdir().unwrap();
    fake_cell(tmp.path(), 1, 10, 0, 0.4);
    emit_report(tmp.path()).unwrap();
    validate_report(tmp.path()).unwrap();
    let path = tmp.path().join(REPORT_DIR).join(report::ACCURACY_MATRIX);
    std::fs::write(&path, "ipc,r=1\n10,1.7\n").unwrap();
    assert!(validate_report(tmp.path()).is_err());
    std::fs::write(&path, "ipc,r=2\n10,0.4\n").unwrap();
    assert!(validate_report(tmp.path()).is_err());
}

#[test]
fn empty_results_dir_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(emit_report(tmp.path()).is_err());
}

fn mnlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mnlab")).args(args).output().unwrap()
}

#[test]
fn binary_runs_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name).to_string_lossy().to_string();
    std::fs::write(
        p("base.json"),
        r#"{"builder": "micro_cnn", "widths": [8, 16], "classes": 10}"#,
    )
    .unwrap();

    let out = mnlab(&[
        "transform",
        "--graph",
        &p("base.json"),
        "--r",
        "2",
        "--output",
        &p("mn.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = mnlab(&["audit", "--graph", &p("mn.json"), "--baseline", &p("base.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let audit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(audit["report"]["M"], 4);
    assert!(audit["preservation"].is_array());
    let out = mnlab(&[
        "audit",
        "--in",
        &p("base.json"),
        "--resolution",
        "16x16",
        "--batch",
        "4",
        "--sweep-r",
        "1,2",
        "--out",
        &p("audit.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved: serde_json::Value = serde_json::from_str(&read(p("audit.json"))).unwrap();
    assert_eq!(saved["report"]["options"]["batch_size"], 4);
    assert_eq!(csv_rows(p("audit.csv")).len(), 3);

    std::fs::write(
        p("synth.json"),
        json!({"spec": {"classes": 10, "samples_per_class": 2, "height": 32, "width": 32},
               "variant": "cifar10", "output": p("train.bin")})
        .to_string(),
    )
    .unwrap();
    let out = mnlab(&["data", "synth", "--config", &p("synth.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = mnlab(&[
        "data",
        "synth",
        "--config",
        &p("synth.json"),
        "--seed",
        "1",
        "--output",
        &p("test.bin"),
    ]);
    assert!(out.status.success());
    assert_eq!(std::fs::metadata(p("train.bin")).unwrap().len(), 20 * 3073);

    let data = json!({"kind": "cifar", "train": p("train.bin"), "test": p("test.bin"), "variant": "cifar10"});
    std::fs::write(p("sub.json"), json!({"data": data, "ipc": 1}).to_string()).unwrap();
    let out = mnlab(&[
        "data",
        "subsample",
        "--config",
        &p("sub.json"),
        "--output",
        &p("sub.idx"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let idx: Vec<usize> = serde_json::from_str(&read(p("sub.idx"))).unwrap();
    assert_eq!(idx.len(), 10);

    std::fs::write(
        p("train.json"),
        json!({"graph": p("base.json"), "data": data, "indices": p("sub.idx"),
               "train": {"batch_size": 10, "max_lr": 0.01, "epochs": 1, "augmentation": null}, "output_dir": p("run")})
        .to_string(),
    )
    .unwrap();
    let out = mnlab(&["train", "--config", &p("train.json"), "--r", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["M"], 4);
    assert_eq!(summary["train_samples"], 10);

    // flag form: hyperparameters only in --config, no test split
    std::fs::write(p("hp.json"), r#"{"batch_size": 10, "epochs": 1, "augmentation": null}"#).unwrap();
    let out = mnlab(&[
        "train",
        "--graph",
        &p("base.json"),
        "--data",
        &p("train.bin"),
        "--indices",
        &p("sub.idx"),
        "--config",
        &p("hp.json"),
        "--out",
        &p("run_flags"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["M"], 1);
    assert!(summary["test_accuracy"].is_null());
    let out = mnlab(&[
        "diagnose",
        "--run",
        &p("run_flags"),
        "--data",
        &p("test.bin"),
        "--out",
        &p("diag_flags"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("diag_flags/paths.csv").exists());

    std::fs::write(
        p("diag.json"),
        json!({"checkpoint": p("run/final.ckpt"), "data": data, "output_dir": p("diag")}).to_string(),
    )
    .unwrap();
    let out = mnlab(&["diagnose", "--config", &p("diag.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("diag/cka_layerwise.csv").exists());

    fake_cell(&tmp.path().join("results"), 1, 10, 0, 0.4);
    let out = mnlab(&["report", "--results-dir", &p("results")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = mnlab(&["report", "--results-dir", &p("nothing")]);
    assert!(!out.status.success());
    let out = mnlab(&[
        "transform",
        "--graph",
        &p("base.json"),
        "--r",
        "3",
        "--output",
        &p("bad.json"),
    ]);
    assert!(!out.status.success());
}

#[test]
fn binary_sweep_exits_nonzero_on_failed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_sweep(&tmp.path().join("out"), &[1, 3], &[4], 1);
    let path = tmp.path().join("sweep.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = mnlab(&["sweep", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("r3_ipc4_seed0"));
    assert!(tmp.path().join("out/report/summary.json").exists());
}
