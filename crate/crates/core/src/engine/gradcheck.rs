//! Central finite-difference checks of every differentiable op at 64-bit.
//!
//! Each trial draws a random small configuration, a random upstream
//! gradient `R` and compares the analytic gradients of `sum(R * op(inputs))`
//! against `(f(x + h) - f(x - h)) / 2h` for every input element.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::ops::{self, ConvGeom};
use super::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero in
/// both gradients are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradOp {
    Conv2d,
    DepthwiseConv2d,
    Dense,
    Norm,
    ReLU,
    AvgPool,
    GlobalPool,
    Add,
    AggregateLogits,
    AggregateProbs,
    SoftmaxXent,
}

impl GradOp {
    pub const ALL: [GradOp; 11] = [
        GradOp::Conv2d,
        GradOp::DepthwiseConv2d,
        GradOp::Dense,
        GradOp::Norm,
        GradOp::ReLU,
        GradOp::AvgPool,
        GradOp::GlobalPool,
        GradOp::Add,
        GradOp::AggregateLogits,
        GradOp::AggregateProbs,
        GradOp::SoftmaxXent,
    ];
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub op: GradOp,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Configuration of the trial with the largest error.
    pub worst_case: String,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Forward = Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    /// Analytic gradients of `sum(R * out)` for each input.
    analytic: Vec<Tensor<f64>>,
    upstream: Tensor<f64>,
    desc: String,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Normal samples kept at least `gap` away from zero (ReLU kink).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn build_case(op: GradOp, rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=2usize);
    match op {
        GradOp::Conv2d | GradOp::DepthwiseConv2d => {
            let (c_phys, groups, c_in, c_out) = if op == GradOp::DepthwiseConv2d {
                let c = rng.random_range(1..=4usize);
                (c, c, c, c)
            } else {
                let c_phys = rng.random_range(1..=3usize);
                let replicas = rng.random_range(1..=2usize);
                let c_in = c_phys * replicas;
                let divisors: Vec<usize> = (1..=c_in).filter(|d| c_in % d == 0).collect();
                let groups = divisors[rng.random_range(0..divisors.len())];
                (c_phys, groups, c_in, groups * rng.random_range(1..=2usize))
            };
            let kernel = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2usize);
            let (h, w) = (rng.random_range(3..=5usize), rng.random_range(3..=5usize));
            let has_bias = rng.random::<bool>();
            let geom = ConvGeom {
                kernel,
                stride,
                padding: kernel / 2,
                groups,
            };
            let x = normal(rng, &[n, c_phys, h, w]);
            let wt = normal(rng, &[c_out, c_in / groups, kernel, kernel]);
            let b = normal(rng, &[c_out]);
            let out = ops::conv2d_forward(&x, &wt, has_bias.then_some(&b), &geom).expect("conv");
            let upstream = normal(rng, out.shape());
            let gr = ops::conv2d_backward(&x, &wt, has_bias, &upstream, &geom).expect("conv backward");
            let mut inputs = vec![x, wt];
            let mut analytic = vec![gr.input, gr.weight];
            if has_bias {
                inputs.push(b);
                analytic.push(gr.bias.expect("bias grad"));
            }
            Case {
                inputs,
                forward: Box::new(move |t| ops::conv2d_forward(&t[0], &t[1], t.get(2), &geom).expect("conv")),
                analytic,
                upstream,
                desc: format!(
                    "n{n} phys{c_phys} in{c_in} out{c_out} g{groups} k{kernel} s{stride} {h}x{w} bias{has_bias}"
                ),
            }
        }
        GradOp::Dense => {
            let groups = rng.random_range(1..=3usize);
            let c_in = groups * rng.random_range(1..=3usize);
            let c_out = groups * rng.random_range(1..=3usize);
            let has_bias = rng.random::<bool>();
            let x = normal(rng, &[n, c_in, 1, 1]);
            let wt = normal(rng, &[c_out, c_in / groups]);
            let b = normal(rng, &[c_out]);
            let out = ops::dense_forward(&x, &wt, has_bias.then_some(&b), groups).expect("dense");
            let upstream = normal(rng, out.shape());
            let gr = ops::dense_backward(&x, &wt, has_bias, &upstream, groups).expect("dense backward");
            let mut inputs = vec![x, wt];
            let mut analytic = vec![gr.input, gr.weight];
            if has_bias {
                inputs.push(b);
                analytic.push(gr.bias.expect("bias grad"));
            }
            Case {
                inputs,
                forward: Box::new(move |t| ops::dense_forward(&t[0], &t[1], t.get(2), groups).expect("dense")),
                analytic,
                upstream,
                desc: format!("n{n} in{c_in} out{c_out} g{groups} bias{has_bias}"),
            }
        }
        GradOp::Norm => {
            let groups = rng.random_range(1..=3usize);
            let c = groups * rng.random_range(1..=2usize);
            let n = rng.random_range(2..=3usize);
            let (h, w) = (rng.random_range(1..=3usize), rng.random_range(2..=3usize));
            let x = normal(rng, &[n, c, h, w]);
            let gamma = normal(rng, &[c]);
            let beta = normal(rng, &[c]);
            let (out, cache) = ops::norm_forward(&x, &gamma, &beta, groups, None).expect("norm");
            let upstream = normal(rng, out.shape());
            let gr = ops::norm_backward(&cache, &gamma, groups, &upstream).expect("norm backward");
            Case {
                inputs: vec![x, gamma, beta],
                forward: Box::new(move |t| ops::norm_forward(&t[0], &t[1], &t[2], groups, None).expect("norm").0),
                analytic: vec![gr.input, gr.gamma, gr.beta],
                upstream,
                desc: format!("n{n} c{c} g{groups} {h}x{w}"),
            }
        }
        GradOp::ReLU => {
            let c = rng.random_range(1..=3usize);
            let x = away_from_zero(rng, &[n, c, 3, 3], 1e-2);
            let out = ops::relu_forward(&x);
            let upstream = normal(rng, out.shape());
            let dx = ops::relu_backward(&out, &upstream);
            Case {
                inputs: vec![x],
                forward: Box::new(|t| ops::relu_forward(&t[0])),
                analytic: vec![dx],
                upstream,
                desc: format!("n{n} c{c}"),
            }
        }
        GradOp::AvgPool => {
            let k = rng.random_range(1..=2usize);
            let c = rng.random_range(1..=3usize);
            let (h, w) = (k * rng.random_range(1..=3usize), k * rng.random_range(1..=3usize));
            let x = normal(rng, &[n, c, h, w]);
            let out = ops::avg_pool_forward(&x, k).expect("pool");
            let upstream = normal(rng, out.shape());
            let dx = ops::avg_pool_backward(x.shape(), k, &upstream);
            Case {
                inputs: vec![x],
                forward: Box::new(move |t| ops::avg_pool_forward(&t[0], k).expect("pool")),
                analytic: vec![dx],
                upstream,
                desc: format!("n{n} c{c} k{k} {h}x{w}"),
            }
        }
        GradOp::GlobalPool => {
            let c = rng.random_range(1..=3usize);
            let (h, w) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
            let x = normal(rng, &[n, c, h, w]);
            let out = ops::global_pool_forward(&x);
            let upstream = normal(rng, out.shape());
            let dx = ops::global_pool_backward(x.shape(), &upstream);
            Case {
                inputs: vec![x],
                forward: Box::new(|t| ops::global_pool_forward(&t[0])),
                analytic: vec![dx],
                upstream,
                desc: format!("n{n} c{c} {h}x{w}"),
            }
        }
        GradOp::Add => {
            let arity = rng.random_range(2..=3usize);
            let shape = [n, rng.random_range(1..=3usize), 2, 2];
            let inputs: Vec<Tensor<f64>> = (0..arity).map(|_| normal(rng, &shape)).collect();
            let upstream = normal(rng, &shape);
            // d(sum R * (a + b + ...))/da = R for every operand
            let analytic = vec![upstream.clone(); arity];
            Case {
                inputs,
                forward: Box::new(|t| ops::add_forward(&t.iter().collect::<Vec<_>>()).expect("add")),
                analytic,
                upstream,
                desc: format!("arity{arity} {shape:?}"),
            }
        }
        GradOp::AggregateLogits | GradOp::AggregateProbs => {
            let paths = rng.random_range(1..=4usize);
            let k = rng.random_range(2..=4usize);
            let x = normal(rng, &[n, paths * k]);
            let probs = op == GradOp::AggregateProbs;
            let fwd = move |t: &[Tensor<f64>]| {
                if probs {
                    ops::aggregate_probs_forward(&t[0], paths).expect("agg")
                } else {
                    ops::aggregate_logits_forward(&t[0], paths).expect("agg")
                }
            };
            let out = fwd(std::slice::from_ref(&x));
            let upstream = normal(rng, out.shape());
            let dx = if probs {
                ops::aggregate_probs_backward(&x, paths, &upstream).expect("agg backward")
            } else {
                ops::aggregate_logits_backward(x.shape(), paths, &upstream)
            };
            Case {
                inputs: vec![x],
                forward: Box::new(fwd),
                analytic: vec![dx],
                upstream,
                desc: format!("n{n} M{paths} K{k}"),
            }
        }
        GradOp::SoftmaxXent => {
            let k = rng.random_range(2..=5usize);
            let n = rng.random_range(1..=4usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let x = normal(rng, &[n, k]).map(|v| 3.0 * v);
            let upstream = normal(rng, &[1]);
            let (_, grad) = ops::softmax_xent(&x, &labels).expect("xent");
            let scale = upstream[0];
            let analytic = vec![grad.map(|g| g * scale)];
            let desc = format!("n{n} K{k}");
            Case {
                inputs: vec![x],
                forward: Box::new(move |t| {
                    let (loss, _) = ops::softmax_xent(&t[0], &labels).expect("xent");
                    Tensor::from_vec(&[1], vec![loss]).expect("scalar")
                }),
                analytic,
                upstream,
                desc,
            }
        }
    }
}

/// Runs `trials` random configurations of `op` and reports the worst relative error.
pub fn check_op(op: GradOp, trials: usize, seed: u64) -> GradCheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0f64, String::new());
    for trial in 0..trials {
        let case = build_case(op, &mut rng);
        let mut inputs = case.inputs.clone();
        for (slot, analytic) in case.analytic.iter().enumerate() {
            for e in 0..inputs[slot].len() {
                let orig = inputs[slot][e];
                inputs[slot][e] = orig + STEP;
                let plus = dot(&(case.forward)(&inputs), &case.upstream);
                inputs[slot][e] = orig - STEP;
                let minus = dot(&(case.forward)(&inputs), &case.upstream);
                inputs[slot][e] = orig;
                let numeric = (plus - minus) / (2.0 * STEP);
                let err = relative_error(analytic[e], numeric);
                if err > worst.0 || !err.is_finite() {
                    worst = (
                        if err.is_finite() { err } else { f64::INFINITY },
                        format!("trial {trial} input {slot} element {e}: {}", case.desc),
                    );
                }
            }
        }
    }
    GradCheckResult {
        op,
        trials,
        max_rel_error: worst.0,
        worst_case: worst.1,
    }
}
