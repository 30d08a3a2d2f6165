//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mnlab-cli --test acceptance -- --nocapture` to see
//! the lines. Set `MNLAB_CIFAR10_DIR` to a directory holding
//! `data_batch_1.bin` and `test_batch.bin` to run the trend check on real
//! CIFAR-10; otherwise it runs on a synthetic set written in the same
//! binary format.

use std::path::{Path, PathBuf};

use mnlab::arch::{build_micro_cnn, build_resnet18, AggregationMode, PreservationClass};
use mnlab::audit::{audit, count_params, param_sweep, AuditOptions, MacConvention};
use mnlab::data::{encode_cifar, synth_dataset, CifarVariant, Standardizer, SynthPattern, SynthSpec};
use mnlab::diagnostics::{cumulative_curves, dead_neuron_ratio, linear_cka, oracle_accuracy, PathOutputs};
use mnlab::engine::gradcheck::{check_op, GradOp};
use mnlab::engine::ops::{self, ConvGeom};
use mnlab::engine::{forward, InitOptions, Mode, ModelState, Tensor};
use mnlab::trainer::{epochs_for_ipc, max_lr_for_batch};
use mnlab::transform::{mn_transform, TransformConfig};
use mnlab_cli::{emit_report, run_sweep, validate_report, SweepConfig};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const R_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];

type Outcome = Result<String, String>;
type Check = Box<dyn Fn() -> Outcome>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_parameter_preservation() -> Outcome {
    let builders = [
        ("resnet18", build_resnet18(100, 3)),
        ("micro_cnn", build_micro_cnn(&[32, 64, 128], 10)),
    ];
    let mut checked = 0;
    for (name, base) in &builders {
        let before = count_params(base)
            .map_err(|e| e.to_string())?
            .params_of_class(PreservationClass::DenseCoupling);
        for r in R_GRID {
            let g = mn_transform(base, &TransformConfig::new(r)).map_err(|e| e.to_string())?;
            let after = count_params(&g)
                .map_err(|e| e.to_string())?
                .params_of_class(PreservationClass::DenseCoupling);
            ensure(before == after, || {
                format!("{name} r={r}: {before} before, {after} after")
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} (builder, r) pairs with identical dense-coupling totals"
    ))
}

fn c2_param_counts() -> Outcome {
    let want_m = [11.2, 11.3, 11.4, 11.7, 12.2, 13.3];
    let want_gain = [0.0, 0.9, 1.8, 4.5, 8.9, 18.8];
    let rows = param_sweep(&build_resnet18(100, 3), &R_GRID).map_err(|e| e.to_string())?;
    for ((row, m), g) in rows.iter().zip(want_m).zip(want_gain) {
        let rel = (row.params as f64 / 1e6 - m).abs() / m;
        ensure(rel <= 0.01, || {
            format!("r={}: {} params is {:.2}% from {m}M", row.r, row.params, 100.0 * rel)
        })?;
        ensure((row.gain_percent_rounded - g).abs() <= 0.5, || {
            format!("r={}: gain {} vs {g}", row.r, row.gain_percent_rounded)
        })?;
    }
    let exact: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.gain_percent)).collect();
    let millions: Vec<String> = rows.iter().map(|r| format!("{}", r.params_m)).collect();
    Ok(format!(
        "params {{{}}}M; gains from these millions {:?}; gains from exact counts [{}]",
        millions.join(", "),
        rows.iter().map(|r| r.gain_percent_rounded).collect::<Vec<_>>(),
        exact.join(", ")
    ))
}

fn c3_macs() -> Outcome {
    let base = build_resnet18(100, 3);
    let opts = AuditOptions {
        batch_size: 128,
        convention: MacConvention::Eval,
        ..AuditOptions::default()
    };
    let mut out = Vec::new();
    for (r, target, tol) in [(1usize, 71.3e9, 0.03), (32, 83.4e9, 0.05)] {
        let g = mn_transform(&base, &TransformConfig::new(r)).map_err(|e| e.to_string())?;
        let macs = audit(&g, &opts).map_err(|e| e.to_string())?.total_macs_per_batch as f64;
        let rel = (macs - target).abs() / target;
        ensure(rel <= tol, || {
            format!("r={r}: {:.2}G vs {:.1}G", macs / 1e9, target / 1e9)
        })?;
        out.push(format!("r={r} {:.2}G ({:.2}% off)", macs / 1e9, 100.0 * rel));
    }
    Ok(out.join(", "))
}

fn c4_channel_law() -> Outcome {
    let builders = [build_resnet18(100, 3), build_micro_cnn(&[32, 64, 128], 10)];
    let mut stages = 0;
    for base in &builders {
        let before = base.stage_channel_widths();
        for r in R_GRID {
            let after = mn_transform(base, &TransformConfig::new(r))
                .map_err(|e| e.to_string())?
                .stage_channel_widths();
            ensure(before.len() == after.len(), || format!("r={r}: stage count changed"))?;
            for ((s, w0), (_, wr)) in before.iter().zip(&after) {
                let want: Vec<usize> = w0.iter().map(|c| c * r).collect();
                ensure(*wr == want, || format!("r={r} stage {s}: {wr:?} vs {want:?}"))?;
                stages += 1;
            }
        }
    }
    Ok(format!("{stages} (stage, r) pairs at exactly r*C channels"))
}

fn c5_gradients() -> Outcome {
    let mut worst = (0.0f64, String::new());
    for op in GradOp::ALL {
        let r = check_op(op, 100, 7);
        ensure(r.trials == 100, || format!("{op:?}: {} trials", r.trials))?;
        ensure(r.max_rel_error < 1e-4, || {
            format!("{op:?}: {:e} at {}", r.max_rel_error, r.worst_case)
        })?;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, format!("{op:?}"));
        }
    }
    Ok(format!(
        "{} ops x 100 trials, worst {:.2e} ({})",
        GradOp::ALL.len(),
        worst.0,
        worst.1
    ))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Direct convolution of one ungrouped slice.
#[allow(clippy::too_many_arguments)]
fn slice_conv(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc +=
                                    wt[((o * c_in + c) * k + ky) * k + kx] * x[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

fn c6_grouped_conv() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let trials = 100;
    for _ in 0..trials {
        let g = rng.random_range(1..=8usize);
        let (cin_g, cout_g) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2usize);
        let (n, h, w) = (
            rng.random_range(1..=3usize),
            rng.random_range(k..=8),
            rng.random_range(k..=8),
        );
        let x = uniform(&mut rng, &[n, g * cin_g, h, w]);
        let wt = uniform(&mut rng, &[g * cout_g, cin_g, k, k]);
        let geom = ConvGeom {
            kernel: k,
            stride,
            padding: k / 2,
            groups: g,
        };
        let y = ops::conv2d_forward(&x, &wt, None, &geom).map_err(|e| e.to_string())?;
        let [_, _, oh, ow] = y.dims4();
        for s in 0..n {
            for gi in 0..g {
                let xs = &x.data()[(s * g + gi) * cin_g * h * w..(s * g + gi + 1) * cin_g * h * w];
                let ws = &wt.data()[gi * cout_g * cin_g * k * k..(gi + 1) * cout_g * cin_g * k * k];
                let want = slice_conv(xs, cin_g, h, w, ws, cout_g, k, stride, k / 2);
                let got = &y.data()[(s * g + gi) * cout_g * oh * ow..(s * g + gi + 1) * cout_g * oh * ow];
                for (a, b) in got.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("{trials} random grouped convs, max abs error {worst:.1e}"))
}

fn c7_protocol() -> Outcome {
    ensure(max_lr_for_batch(128) == 5e-3, || {
        format!("max_lr(128) = {}", max_lr_for_batch(128))
    })?;
    let grid = [
        (500, 200),
        (200, 200),
        (100, 200),
        (50, 400),
        (20, 1000),
        (10, 2000),
        (5, 4000),
        (1, 20000),
    ];
    for (ipc, epochs) in grid {
        ensure(epochs_for_ipc(ipc) == epochs, || {
            format!("ipc {ipc}: {} epochs", epochs_for_ipc(ipc))
        })?;
    }
    Ok("max_lr(128) = 5e-3 and all 8 ipc epoch budgets exact".into())
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// CKA through explicit centered Gram matrices.
fn cka_gram(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let h = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
    let k = h.dot(&x.dot(&x.t())).dot(&h);
    let l = h.dot(&y.dot(&y.t())).dot(&h);
    let hsic = |a: &Array2<f64>, b: &Array2<f64>| (a * b).sum();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

/// Householder reflection, an orthogonal map.
fn reflection(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let v = random_matrix(rng, d, 1);
    let norm2 = v.iter().map(|x| x * x).sum::<f64>();
    Array2::from_shape_fn(
        (d, d),
        |(i, j)| if i == j { 1.0 } else { 0.0 } - 2.0 * v[[i, 0]] * v[[j, 0]] / norm2,
    )
}

fn first_max(v: &[f64]) -> usize {
    let mut b = 0;
    for j in 1..v.len() {
        if v[j] > v[b] {
            b = j;
        }
    }
    b
}

fn c8_diagnostics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cka = |a: &Array2<f64>, b: &Array2<f64>| linear_cka(a.view(), b.view()).map_err(|e| e.to_string());
    let mut cka_err = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..=64);
        let (d1, d2) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random_matrix(&mut rng, n, d1);
        let y = random_matrix(&mut rng, n, d2);
        let fast = cka(&x, &y)?.ok_or("undefined CKA on random data")?;
        cka_err = cka_err.max((fast - cka_gram(&x, &y)).abs());
        let back = cka(&y, &x)?.ok_or("undefined")?;
        ensure(fast == back || (fast - back).abs() < 1e-12, || "asymmetric CKA".into())?;
        let self_sim = cka(&x, &x)?.ok_or("undefined")?;
        ensure((self_sim - 1.0).abs() < 1e-10, || format!("self CKA {self_sim}"))?;
        let rotated = x.dot(&reflection(&mut rng, d1));
        let rot = cka(&x, &rotated)?.ok_or("undefined")?;
        ensure((rot - 1.0).abs() < 1e-10, || format!("rotated CKA {rot}"))?;
        let scaled = &x * rng.random_range(0.1..10.0);
        let sc = cka(&x, &scaled)?.ok_or("undefined")?;
        ensure((sc - 1.0).abs() < 1e-10, || format!("scaled CKA {sc}"))?;
    }
    ensure(cka_err < 1e-10, || {
        format!("CKA differs from Gram oracle by {cka_err:e}")
    })?;

    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let m = rng.random_range(1..=8);
        let k = rng.random_range(2..=6);
        let logits = Array3::from_shape_fn((n, m, k), |_| rng.random_range(0..4) as f64);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let po =
            PathOutputs::new(logits.clone(), labels.clone(), AggregationMode::Logits).map_err(|e| e.to_string())?;
        let pred = |i: usize, paths: &[usize]| {
            let mean: Vec<f64> = (0..k)
                .map(|j| paths.iter().map(|&p| logits[[i, p, j]]).sum::<f64>() / paths.len() as f64)
                .collect();
            first_max(&mean)
        };
        let hits = (0..n).filter(|&i| (0..m).any(|p| pred(i, &[p]) == labels[i])).count();
        ensure(oracle_accuracy(&po) == hits as f64 / n as f64, || {
            "oracle accuracy mismatch".into()
        })?;
        let per_path: Vec<f64> = (0..m)
            .map(|p| (0..n).filter(|&i| pred(i, &[p]) == labels[i]).count() as f64 / n as f64)
            .collect();
        for c in cumulative_curves(&po) {
            let mut order: Vec<usize> = (0..m).collect();
            match c.ordering {
                mnlab::diagnostics::Ordering::BestFirst => {
                    order.sort_by(|&a, &b| per_path[b].partial_cmp(&per_path[a]).unwrap())
                }
                mnlab::diagnostics::Ordering::WorstFirst => {
                    order.sort_by(|&a, &b| per_path[a].partial_cmp(&per_path[b]).unwrap())
                }
                mnlab::diagnostics::Ordering::Original => {}
            }
            ensure(c.path_order == order, || {
                format!("{:?} order {:?} vs {order:?}", c.ordering, c.path_order)
            })?;
            for kk in 1..=m {
                let correct = (0..n).filter(|&i| pred(i, &order[..kk]) == labels[i]).count();
                ensure(c.accuracy[kk - 1] == correct as f64 / n as f64, || {
                    format!("{:?} curve at {kk}", c.ordering)
                })?;
            }
        }
    }

    let g = mn_transform(&build_micro_cnn(&[8, 16], 3), &TransformConfig::new(2)).map_err(|e| e.to_string())?;
    let mut dnr_layers = 0;
    for seed in 0..5u64 {
        let mut s = ModelState::<f64>::init(&g, seed, InitOptions::default());
        let bias = s.params.get_mut("s1.norm.bias").ok_or("missing s1.norm.bias")?;
        for ch in 0..rng.random_range(0..6usize) {
            bias.value[ch * 3] = -1e6;
        }
        let spec = SynthSpec {
            classes: 3,
            samples_per_class: rng.random_range(1..=20),
            height: 8,
            width: 8,
            channels: 3,
            pattern: SynthPattern::Blobs,
            noise: 0.3,
        };
        let mut ds = synth_dataset(&spec, seed).map_err(|e| e.to_string())?;
        Standardizer::fit(&ds).apply(&mut ds);
        let report = dead_neuron_ratio(&g, &s, &ds, 7).map_err(|e| e.to_string())?;
        let pass = forward(&g, &s, &ds.images.cast::<f64>(), Mode::Eval, true).map_err(|e| e.to_string())?;
        for layer in &report {
            let t = pass.tap(&g, &layer.layer).ok_or("missing tap")?;
            let [n, c, h, w] = t.dims4();
            let dead = (0..c)
                .filter(|&ch| (0..n).all(|i| (0..h * w).all(|p| t.data()[(i * c + ch) * h * w + p] == 0.0)))
                .count();
            ensure(layer.dead == dead && layer.total == c, || {
                format!("{}: {} dead vs {dead} by scan", layer.layer, layer.dead)
            })?;
            dnr_layers += 1;
        }
    }
    Ok(format!(
        "CKA max error {cka_err:.1e} over 50 fixtures with self/rotation/scale/symmetry; \
         200 path fixtures exact; {dnr_layers} DNR layers exact"
    ))
}

fn c9_path_separation() -> Outcome {
    std::env::set_var(mnlab_cli::DETERMINISTIC_ENV, "1");
    let g = mn_transform(&mnlab::arch::build_resnet(&[8, 16], 5, 3), &TransformConfig::new(2))
        .map_err(|e| e.to_string())?;
    let s = ModelState::<f32>::init(&g, 4, InitOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Tensor<f32> = uniform(&mut rng, &[6, 3, 8, 8]).cast();
    let before = forward(&g, &s, &x, Mode::Eval, false).map_err(|e| e.to_string())?;
    let (m, k) = (g.path_multiplicity, g.num_classes());
    for path in 0..m {
        let mut z = s.clone();
        z.zero_path(&g, path);
        let after = forward(&g, &z, &x, Mode::Eval, false).map_err(|e| e.to_string())?;
        let mut moved = false;
        for i in 0..6 {
            for p in 0..m {
                let a = &before.path_logits.data()[(i * m + p) * k..(i * m + p + 1) * k];
                let b = &after.path_logits.data()[(i * m + p) * k..(i * m + p + 1) * k];
                let same = a.iter().zip(b).all(|(u, v)| u.to_bits() == v.to_bits());
                if p == path {
                    moved |= !same;
                } else {
                    ensure(same, || format!("path {p} changed when zeroing {path}"))?;
                }
            }
        }
        ensure(moved, || format!("zeroing path {path} left its logits unchanged"))?;
    }
    Ok(format!("{m} paths, others bitwise unchanged"))
}

fn c10_smoke_sweep(out: &Path) -> Outcome {
    let cfg: SweepConfig = serde_json::from_value(json!({
        "graph": {"builder": "micro_cnn", "widths": [16, 32], "classes": 4},
        "r_grid": [1, 4],
        "ipc_grid": [32],
        "seeds": 3,
        "data": {"kind": "synthetic", "classes": 4, "train_per_class": 32, "test_per_class": 32,
                 "height": 8, "width": 8, "noise": 0.1},
        "train": {"batch_size": 32, "max_lr": 0.01, "epochs": 25, "augmentation": null},
        "output_dir": out,
    }))
    .map_err(|e| e.to_string())?;
    let outcome = run_sweep(&cfg)
        .map_err(|e| format!("{e:#}"))?
        .into_result()
        .map_err(|e| e.to_string())?;
    ensure(outcome.results.len() == 6, || {
        format!("{} cells", outcome.results.len())
    })?;
    let mut min_train = 1.0f64;
    for r in &outcome.results {
        ensure(r.final_train_accuracy >= 0.95, || {
            format!("{}: train accuracy {}", r.cell, r.final_train_accuracy)
        })?;
        min_train = min_train.min(r.final_train_accuracy);
        if r.r > 1 {
            let best = r.per_path_accuracy.iter().copied().fold(0.0, f64::max);
            ensure(r.oracle_accuracy >= best, || {
                format!("{}: oracle {} < best path {best}", r.cell, r.oracle_accuracy)
            })?;
        }
    }
    emit_report(out).map_err(|e| e.to_string())?;
    let summary = validate_report(out).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} cells converged (min train accuracy {min_train}), oracle >= best path, {} report files valid",
        outcome.results.len(),
        summary.files.len()
    ))
}

/// Data source, its description, and the augmentation setting for the trend run.
fn trend_data(work: &Path) -> Result<(serde_json::Value, String, serde_json::Value), String> {
    if let Some(dir) = std::env::var_os("MNLAB_CIFAR10_DIR").map(PathBuf::from) {
        let (train, test) = (dir.join("data_batch_1.bin"), dir.join("test_batch.bin"));
        if train.exists() && test.exists() {
            let src = json!({"kind": "cifar", "train": train, "test": test, "variant": "cifar10"});
            let aug = json!({"flip": true, "shift": 4});
            return Ok((src, format!("CIFAR-10 from {}", dir.display()), aug));
        }
    }
    let spec = |per| SynthSpec {
        classes: 10,
        samples_per_class: per,
        height: 32,
        width: 32,
        channels: 3,
        pattern: SynthPattern::Stripes,
        noise: 0.6,
    };
    std::fs::create_dir_all(work).map_err(|e| e.to_string())?;
    let mut paths = Vec::new();
    for (name, per, seed) in [("train.bin", 20, 0), ("test.bin", 50, 1)] {
        let ds = synth_dataset(&spec(per), seed).map_err(|e| e.to_string())?;
        let bytes = encode_cifar(&ds, CifarVariant::Cifar10).map_err(|e| e.to_string())?;
        let path = work.join(name);
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        paths.push(path);
    }
    let src = json!({"kind": "cifar", "train": paths[0], "test": paths[1], "variant": "cifar10"});
    Ok((
        src,
        "synthetic stand-in in CIFAR-10 binary format (MNLAB_CIFAR10_DIR unset)".into(),
        serde_json::Value::Null,
    ))
}

fn c11_trend(out: &Path) -> Outcome {
    let (data, source, augmentation) = trend_data(&out.join("data"))?;
    let cfg: SweepConfig = serde_json::from_value(json!({
        "graph": {"builder": "micro_cnn", "widths": [16, 32], "classes": 10},
        "r_grid": [1, 4],
        "ipc_grid": [10],
        "seeds": 1,
        "data": data,
        "train": {"batch_size": 32, "max_lr": 0.01, "epochs": 40, "augmentation": augmentation},
        "output_dir": out.join("sweep"),
    }))
    .map_err(|e| e.to_string())?;
    let outcome = run_sweep(&cfg)
        .map_err(|e| format!("{e:#}"))?
        .into_result()
        .map_err(|e| e.to_string())?;
    let gap = |r: usize| -> Result<(f64, &mnlab_cli::CellResult), String> {
        let c = outcome
            .results
            .iter()
            .find(|c| c.r == r)
            .ok_or(format!("no r={r} result"))?;
        ensure(c.per_path_accuracy.len() == r * r, || {
            format!("r={r}: {} path accuracies", c.per_path_accuracy.len())
        })?;
        Ok((c.oracle_accuracy - c.test_accuracy, c))
    };
    let (g1, c1) = gap(1)?;
    let (g4, c4) = gap(4)?;
    ensure(g4 > g1, || format!("oracle-test gap r=4 {g4:.4} not above r=1 {g1:.4}"))?;
    Ok(format!(
        "{source}: r=1 test {:.3} gap {g1:.3}; r=4 test {:.3} oracle {:.3} gap {g4:.3} over {} paths",
        c1.test_accuracy,
        c4.test_accuracy,
        c4.oracle_accuracy,
        c4.per_path_accuracy.len()
    ))
}

#[test]
fn acceptance_criteria() {
    let work = tempfile::tempdir().unwrap();
    let smoke = work.path().join("smoke");
    let trend = work.path().join("trend");
    let criteria: Vec<(&str, Check)> = vec![
        ("C1 parameter preservation", Box::new(c1_parameter_preservation)),
        ("C2 parameter counts", Box::new(c2_param_counts)),
        ("C3 evaluation MACs", Box::new(c3_macs)),
        ("C4 activation channel law", Box::new(c4_channel_law)),
        ("C5 gradient checks", Box::new(c5_gradients)),
        ("C6 grouped conv equivalence", Box::new(c6_grouped_conv)),
        ("C7 protocol formulas", Box::new(c7_protocol)),
        ("C8 diagnostics oracles", Box::new(c8_diagnostics)),
        ("C9 path separation", Box::new(c9_path_separation)),
        ("C10 desk-scale sweep", Box::new(move || c10_smoke_sweep(&smoke))),
        ("C11 trend run", Box::new(move || c11_trend(&trend))),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        let start = std::time::Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panic".into())));
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                println!("FAIL {name} [{secs:.1}s]: {why}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
