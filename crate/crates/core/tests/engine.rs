//! Numerical correctness of the compute layer against independent oracles.

use mnlab::arch::{build_depthwise_block, build_micro_cnn, build_resnet};
use mnlab::engine::gradcheck::{check_op, GradOp};
use mnlab::engine::ops::{self, ConvGeom};
use mnlab::engine::{backward, checkpoint, forward, InitOptions, Mode, ModelState, Tensor};
use mnlab::transform::{mn_transform, TransformConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

#[test]
fn every_op_passes_finite_differences() {
    for op in GradOp::ALL {
        let r = check_op(op, 100, 2024);
        assert!(
            r.max_rel_error < 1e-4,
            "{op:?}: {:e} at {}",
            r.max_rel_error,
            r.worst_case
        );
    }
}

#[allow(clippy::too_many_arguments)]
/// Textbook direct convolution of one group, written independently of the engine.
fn naive_conv(
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

#[test]
fn grouped_conv_equals_concatenated_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let g = rng.random_range(1..=4usize);
        let (cin_g, cout_g) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let k = [1, 3][rng.random_range(0..2)];
        let stride = rng.random_range(1..=2usize);
        let (n, h, w) = (
            rng.random_range(1..=2usize),
            rng.random_range(3..=6usize),
            rng.random_range(3..=6usize),
        );
        let x = normal(&mut rng, &[n, g * cin_g, h, w]);
        let wt = normal(&mut rng, &[g * cout_g, cin_g, k, k]);
        let geom = ConvGeom {
            kernel: k,
            stride,
            padding: k / 2,
            groups: g,
        };
        let y = ops::conv2d_forward(&x, &wt, None, &geom).unwrap();
        let [_, _, oh, ow] = y.dims4();
        for s in 0..n {
            for gi in 0..g {
                let xs = &x.data()[(s * g + gi) * cin_g * h * w..(s * g + gi + 1) * cin_g * h * w];
                let ws = &wt.data()[gi * cout_g * cin_g * k * k..(gi + 1) * cout_g * cin_g * k * k];
                let slice = naive_conv(xs, cin_g, h, w, ws, cout_g, k, stride, k / 2);
                let got = &y.data()[(s * g + gi) * cout_g * oh * ow..(s * g + gi + 1) * cout_g * oh * ow];
                for (a, b) in got.iter().zip(&slice) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}

fn loss_of(g: &mnlab::ArchGraph, s: &ModelState<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let pass = forward(g, s, x, Mode::Train, false).unwrap();
    ops::softmax_xent(&pass.aggregated, labels).unwrap().0
}

#[test]
fn whole_graph_backward_matches_finite_differences() {
    let graphs = [
        mn_transform(&build_resnet(&[4, 8], 3, 3), &TransformConfig::new(2)).unwrap(),
        mn_transform(&build_depthwise_block(4, 3), &TransformConfig::new(2)).unwrap(),
        {
            let mut cfg = TransformConfig::new(2);
            cfg.aggregation = mnlab::arch::AggregationMode::Probabilities;
            mn_transform(&build_micro_cnn(&[4, 8], 3), &cfg).unwrap()
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in &graphs {
        let mut s = ModelState::<f64>::init(g, 3, InitOptions::default());
        let x = normal(&mut rng, &[3, 3, 6, 6]);
        let labels = [0, 2, 1];
        let pass = forward(g, &s, &x, Mode::Train, true).unwrap();
        let (_, grad) = ops::softmax_xent(&pass.aggregated, &labels).unwrap();
        backward(g, &mut s, &pass, &grad).unwrap();
        let keys: Vec<String> = s.params.keys().cloned().collect();
        for key in keys {
            let analytic = s.params[&key].grad.clone().unwrap();
            let len = analytic.len();
            for e in (0..len).step_by(len.div_ceil(4)) {
                let orig = s.params[&key].value[e];
                s.params.get_mut(&key).unwrap().value[e] = orig + 1e-5;
                let plus = loss_of(g, &s, &x, &labels);
                s.params.get_mut(&key).unwrap().value[e] = orig - 1e-5;
                let minus = loss_of(g, &s, &x, &labels);
                s.params.get_mut(&key).unwrap().value[e] = orig;
                let numeric = (plus - minus) / 2e-5;
                let err = (analytic[e] - numeric).abs() / analytic[e].abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-4, "{key}[{e}]: analytic {} numeric {numeric}", analytic[e]);
            }
        }
    }
}

#[test]
fn zeroing_a_path_changes_only_that_path() {
    let g = mn_transform(&build_resnet(&[4, 8], 5, 3), &TransformConfig::new(2)).unwrap();
    let s = ModelState::<f32>::init(&g, 9, InitOptions::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f32> = normal(&mut rng, &[4, 3, 8, 8]).cast();
    let before = forward(&g, &s, &x, Mode::Eval, false).unwrap();
    for path in 0..g.path_multiplicity {
        let mut z = s.clone();
        z.zero_path(&g, path);
        let after = forward(&g, &z, &x, Mode::Eval, false).unwrap();
        let (m, k) = (g.path_multiplicity, g.num_classes());
        let mut changed = false;
        for i in 0..4 {
            for p in 0..m {
                let a = &before.path_logits.data()[(i * m + p) * k..(i * m + p + 1) * k];
                let b = &after.path_logits.data()[(i * m + p) * k..(i * m + p + 1) * k];
                if p == path {
                    changed |= a != b;
                } else {
                    assert_eq!(a, b, "path {p} moved when zeroing {path}");
                }
            }
        }
        assert!(changed, "zeroing path {path} had no effect");
    }
}

#[test]
fn checkpoint_round_trip_and_cross_precision() {
    let g = mn_transform(&build_micro_cnn(&[4], 2), &TransformConfig::new(2)).unwrap();
    let s = ModelState::<f32>::init(&g, 1, InitOptions::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &g, &s).unwrap();
    let (g2, s2) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(g2, g);
    assert_eq!(s2, s);
    let (_, s64) = checkpoint::load::<f64>(&path).unwrap();
    for (k, p) in &s.params {
        for (a, b) in p.value.data().iter().zip(s64.params[k].value.data()) {
            assert_eq!(*a as f64, *b);
        }
    }
}
