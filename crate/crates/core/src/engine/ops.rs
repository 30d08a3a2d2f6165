//! Forward and backward kernels for every layer kind.
//!
//! All kernels are single-threaded with a fixed summation order, so equal
//! inputs give bitwise-equal outputs.

use crate::scalar::Scalar;

use super::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + offset - padding` lands inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, padding: usize, offset: usize) -> (usize, usize) {
    let lo = if offset >= padding {
        0
    } else {
        (padding - offset).div_ceil(stride)
    };
    let hi = if len + padding > offset {
        out_len.min((len + padding - 1 - offset) / stride + 1)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct ConvShape {
    n: usize,
    c_phys: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    oh: usize,
    ow: usize,
}

fn conv_shape<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, geom: &ConvGeom) -> Result<ConvShape, TensorError> {
    let [n, c_phys, h, w] = x.dims4();
    let [c_out, cin_g, kh, kw] = weight.dims4();
    if kh != geom.kernel || kw != geom.kernel {
        return Err(TensorError::Shape(format!("kernel {kh}x{kw} != {}", geom.kernel)));
    }
    if geom.groups == 0 || c_out % geom.groups != 0 {
        return Err(TensorError::Shape(format!(
            "C_out {c_out} not divisible by groups {}",
            geom.groups
        )));
    }
    let c_logical = cin_g * geom.groups;
    if !c_logical.is_multiple_of(c_phys) {
        return Err(TensorError::Shape(format!(
            "weight expects {c_logical} input channels, input has {c_phys}"
        )));
    }
    if h + 2 * geom.padding < geom.kernel || w + 2 * geom.padding < geom.kernel {
        return Err(TensorError::Shape("input smaller than kernel".into()));
    }
    Ok(ConvShape {
        n,
        c_phys,
        h,
        w,
        c_out,
        cin_g,
        cout_g: c_out / geom.groups,
        oh: geom.out_len(h),
        ow: geom.out_len(w),
    })
}

/// Grouped 2-D convolution. Weight layout `[C_out, C_in / groups, K, K]`.
///
/// When the weight expects more input channels than `x` carries, the input
/// is read as tiled along the channel axis (logical channel `c` reads
/// physical channel `c % C_phys`).
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Result<Tensor<T>, TensorError> {
    let s = conv_shape(x, weight, geom)?;
    let k = geom.kernel;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = Tensor::zeros(&[s.n, s.c_out, s.oh, s.ow]);
    let od = out.data_mut();
    let plane = s.oh * s.ow;
    for ni in 0..s.n {
        for oc in 0..s.c_out {
            let g = oc / s.cout_g;
            let ob = (ni * s.c_out + oc) * plane;
            if let Some(b) = bias {
                od[ob..ob + plane].iter_mut().for_each(|v| *v = b[oc]);
            }
            for ic in 0..s.cin_g {
                let src = (g * s.cin_g + ic) % s.c_phys;
                let ib = (ni * s.c_phys + src) * s.h * s.w;
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(s.oh, s.h, geom.stride, geom.padding, ky);
                    for kx in 0..k {
                        let (xlo, xhi) = valid_range(s.ow, s.w, geom.stride, geom.padding, kx);
                        let wv = wd[((oc * s.cin_g + ic) * k + ky) * k + kx];
                        for oy in ylo..yhi {
                            let iy = oy * geom.stride + ky - geom.padding;
                            let orow = ob + oy * s.ow;
                            let irow = ib + iy * s.w;
                            for ox in xlo..xhi {
                                let ix = ox * geom.stride + kx - geom.padding;
                                od[orow + ox] += wv * xd[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    geom: &ConvGeom,
) -> Result<ConvGrads<T>, TensorError> {
    let s = conv_shape(x, weight, geom)?;
    if grad_out.dims4() != [s.n, s.c_out, s.oh, s.ow] {
        return Err(TensorError::Shape(format!(
            "grad_out {:?} does not match conv output",
            grad_out.shape()
        )));
    }
    let k = geom.kernel;
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = has_bias.then(|| Tensor::zeros(&[s.c_out]));
    let plane = s.oh * s.ow;
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        for ni in 0..s.n {
            for oc in 0..s.c_out {
                let g = oc / s.cout_g;
                let ob = (ni * s.c_out + oc) * plane;
                if let Some(db) = db.as_mut() {
                    let mut acc = T::zero();
                    for &v in &gd[ob..ob + plane] {
                        acc += v;
                    }
                    db[oc] += acc;
                }
                for ic in 0..s.cin_g {
                    let src = (g * s.cin_g + ic) % s.c_phys;
                    let ib = (ni * s.c_phys + src) * s.h * s.w;
                    for ky in 0..k {
                        let (ylo, yhi) = valid_range(s.oh, s.h, geom.stride, geom.padding, ky);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_range(s.ow, s.w, geom.stride, geom.padding, kx);
                            let widx = ((oc * s.cin_g + ic) * k + ky) * k + kx;
                            let wv = wd[widx];
                            let mut acc = T::zero();
                            for oy in ylo..yhi {
                                let iy = oy * geom.stride + ky - geom.padding;
                                let orow = ob + oy * s.ow;
                                let irow = ib + iy * s.w;
                                for ox in xlo..xhi {
                                    let ix = ox * geom.stride + kx - geom.padding;
                                    let go = gd[orow + ox];
                                    acc += go * xd[irow + ix];
                                    dxd[irow + ix] += wv * go;
                                }
                            }
                            dwd[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Grouped fully connected layer over `[N, C_in]` (or `[N, C_in, 1, 1]`) input.
/// Weight layout `[C_out, C_in / groups]`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Tensor<T>, TensorError> {
    let [n, c_in, h, w] = x.dims4();
    if h * w != 1 {
        return Err(TensorError::Shape(format!("dense layer needs 1x1 input, got {h}x{w}")));
    }
    let [c_out, cin_g, ..] = weight.dims4();
    let x4 = x.clone().reshaped(&[n, c_in, 1, 1])?;
    let w4 = weight.clone().reshaped(&[c_out, cin_g, 1, 1])?;
    let geom = ConvGeom {
        kernel: 1,
        stride: 1,
        padding: 0,
        groups,
    };
    conv2d_forward(&x4, &w4, bias, &geom)?.reshaped(&[n, c_out, 1, 1])
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    groups: usize,
) -> Result<ConvGrads<T>, TensorError> {
    let [n, c_in, ..] = x.dims4();
    let [c_out, cin_g, ..] = weight.dims4();
    let x4 = x.clone().reshaped(&[n, c_in, 1, 1])?;
    let w4 = weight.clone().reshaped(&[c_out, cin_g, 1, 1])?;
    let g4 = grad_out.clone().reshaped(&[n, c_out, 1, 1])?;
    let geom = ConvGeom {
        kernel: 1,
        stride: 1,
        padding: 0,
        groups,
    };
    let grads = conv2d_backward(&x4, &w4, has_bias, &g4, &geom)?;
    Ok(ConvGrads {
        input: grads.input.reshaped(x.shape())?,
        weight: grads.weight.reshaped(weight.shape())?,
        bias: grads.bias,
    })
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved state of a normalization forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics per group (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

fn norm_dims<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, groups: usize) -> Result<[usize; 5], TensorError> {
    let [n, c, h, w] = x.dims4();
    if groups == 0 || c % groups != 0 || gamma.len() != c {
        return Err(TensorError::Shape(format!(
            "norm over {c} channels in {groups} groups with {} affine entries",
            gamma.len()
        )));
    }
    Ok([n, c, h * w, groups, c / groups])
}

/// Group-structured normalization.
///
/// Statistics are shared by the `C / groups` consecutive channels of each
/// group and pooled over batch and spatial positions; scale and shift are
/// per channel. Train mode uses batch statistics, eval mode the supplied
/// running statistics.
pub fn norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    running: Option<(&[T], &[T])>,
) -> Result<(Tensor<T>, NormCache<T>), TensorError> {
    let [n, c, hw, groups, cg] = norm_dims(x, gamma, groups)?;
    let eps = T::of(NORM_EPS);
    let xd = x.data();
    let count = T::of_usize(n * cg * hw);
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    let train = running.is_none();
    match running {
        None => {
            for g in 0..groups {
                let mut acc = T::zero();
                for ni in 0..n {
                    let b = (ni * c + g * cg) * hw;
                    for &v in &xd[b..b + cg * hw] {
                        acc += v;
                    }
                }
                let mu = acc / count;
                let mut sq = T::zero();
                for ni in 0..n {
                    let b = (ni * c + g * cg) * hw;
                    for &v in &xd[b..b + cg * hw] {
                        sq += (v - mu) * (v - mu);
                    }
                }
                mean[g] = mu;
                var[g] = sq / count;
            }
        }
        Some((rm, rv)) => {
            if rm.len() != groups || rv.len() != groups {
                return Err(TensorError::Shape("running statistics length != groups".into()));
            }
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let (xh, yd) = (xhat.data_mut(), y.data_mut());
        for ni in 0..n {
            for ch in 0..c {
                let g = ch / cg;
                let b = (ni * c + ch) * hw;
                for i in b..b + hw {
                    let v = (xd[i] - mean[g]) * inv_std[g];
                    xh[i] = v;
                    yd[i] = gamma[ch] * v + beta[ch];
                }
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        batch_mean: if train { mean } else { Vec::new() },
        batch_var: if train { var } else { Vec::new() },
        train,
    };
    Ok((y, cache))
}

pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    groups: usize,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>, TensorError> {
    let [n, c, hw, groups, cg] = norm_dims(&cache.xhat, gamma, groups)?;
    let (xh, gd) = (cache.xhat.data(), grad_out.data());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(cache.xhat.shape());
    for ch in 0..c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for ni in 0..n {
            let b = (ni * c + ch) * hw;
            for i in b..b + hw {
                sg += gd[i] * xh[i];
                sb += gd[i];
            }
        }
        dgamma[ch] = sg;
        dbeta[ch] = sb;
    }
    let dxd = dx.data_mut();
    if !cache.train {
        for ni in 0..n {
            for ch in 0..c {
                let b = (ni * c + ch) * hw;
                let scale = gamma[ch] * cache.inv_std[ch / cg];
                for i in b..b + hw {
                    dxd[i] = gd[i] * scale;
                }
            }
        }
        return Ok(NormGrads {
            input: dx,
            gamma: dgamma,
            beta: dbeta,
        });
    }
    let count = T::of_usize(n * cg * hw);
    for g in 0..groups {
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for ni in 0..n {
            for ch in g * cg..(g + 1) * cg {
                let b = (ni * c + ch) * hw;
                for i in b..b + hw {
                    let dxh = gd[i] * gamma[ch];
                    s1 += dxh;
                    s2 += dxh * xh[i];
                }
            }
        }
        let k = cache.inv_std[g] / count;
        for ni in 0..n {
            for ch in g * cg..(g + 1) * cg {
                let b = (ni * c + ch) * hw;
                for i in b..b + hw {
                    let dxh = gd[i] * gamma[ch];
                    dxd[i] = k * (count * dxh - s1 - xh[i] * s2);
                }
            }
        }
    }
    Ok(NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Non-overlapping `k x k` average pooling (trailing rows/columns dropped).
pub fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>, TensorError> {
    let [n, c, h, w] = x.dims4();
    let (oh, ow) = (h / k, w / k);
    if k == 0 || oh == 0 || ow == 0 {
        return Err(TensorError::Shape(format!("cannot pool {h}x{w} with window {k}")));
    }
    let scale = T::one() / T::of_usize(k * k);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let od = out.data_mut();
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += xd[nc * h * w + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                od[nc * oh * ow + oy * ow + ox] = acc * scale;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<T: Scalar>(input_shape: &[usize], k: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let [n, c, h, w] = dx.dims4();
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::of_usize(k * k);
    let gd = grad_out.data();
    let dxd = dx.data_mut();
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gd[nc * oh * ow + oy * ow + ox] * scale;
                for dy in 0..k {
                    for ddx in 0..k {
                        dxd[nc * h * w + (oy * k + dy) * w + ox * k + ddx] = g;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4();
    let hw = h * w;
    let scale = T::one() / T::of_usize(hw);
    let xd = x.data();
    let data = (0..n * c)
        .map(|i| {
            let mut acc = T::zero();
            for &v in &xd[i * hw..(i + 1) * hw] {
                acc += v;
            }
            acc * scale
        })
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data).expect("shape by construction")
}

pub fn global_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let [n, c, h, w] = dx.dims4();
    let hw = h * w;
    let scale = T::one() / T::of_usize(hw);
    let gd = grad_out.data();
    for (i, &g) in gd.iter().enumerate().take(n * c) {
        let g = g * scale;
        dx.data_mut()[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v = g);
    }
    dx
}

pub fn add_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let mut out = inputs[0].clone();
    for t in &inputs[1..] {
        if t.shape() != out.shape() {
            return Err(TensorError::Shape(format!("add {:?} + {:?}", out.shape(), t.shape())));
        }
        out.add_assign(t);
    }
    Ok(out)
}

/// Mean over `paths` consecutive blocks of `[N, paths * K]` logits.
pub fn aggregate_logits_forward<T: Scalar>(x: &Tensor<T>, paths: usize) -> Result<Tensor<T>, TensorError> {
    let [n, total, ..] = x.dims4();
    if paths == 0 || total % paths != 0 {
        return Err(TensorError::Shape(format!(
            "{total} logits do not split into {paths} paths"
        )));
    }
    let k = total / paths;
    let m = T::of_usize(paths);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, k]);
    for ni in 0..n {
        for j in 0..k {
            let mut acc = T::zero();
            for p in 0..paths {
                acc += xd[ni * total + p * k + j];
            }
            out[ni * k + j] = acc / m;
        }
    }
    Ok(out)
}

pub fn aggregate_logits_backward<T: Scalar>(input_shape: &[usize], paths: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let [n, total, ..] = dx.dims4();
    let k = total / paths;
    let m = T::of_usize(paths);
    for ni in 0..n {
        for p in 0..paths {
            for j in 0..k {
                dx[ni * total + p * k + j] = grad_out[ni * k + j] / m;
            }
        }
    }
    dx
}

fn softmax_row<T: Scalar>(z: &[T], out: &mut [T]) {
    let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-path softmax probabilities for `[N, paths * K]` logits.
pub fn path_softmax<T: Scalar>(x: &Tensor<T>, paths: usize) -> Tensor<T> {
    let [n, total, ..] = x.dims4();
    let k = total / paths;
    let mut p = Tensor::zeros(&[n, total]);
    for row in 0..n * paths {
        softmax_row(
            &x.data()[row * k..(row + 1) * k],
            &mut p.data_mut()[row * k..(row + 1) * k],
        );
    }
    p
}

/// `log((1/M) sum_m softmax(z_m))`: log of the mean path probability.
pub fn aggregate_probs_forward<T: Scalar>(x: &Tensor<T>, paths: usize) -> Result<Tensor<T>, TensorError> {
    let [_, total, ..] = x.dims4();
    if paths == 0 || total % paths != 0 {
        return Err(TensorError::Shape(format!(
            "{total} logits do not split into {paths} paths"
        )));
    }
    let probs = path_softmax(x, paths);
    let mut mean = aggregate_logits_forward(&probs, paths)?;
    for v in mean.data_mut() {
        *v = v.ln();
    }
    Ok(mean)
}

pub fn aggregate_probs_backward<T: Scalar>(
    x: &Tensor<T>,
    paths: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let [n, total, ..] = x.dims4();
    let k = total / paths;
    let probs = path_softmax(x, paths);
    let mean = aggregate_logits_forward(&probs, paths)?;
    let m = T::of_usize(paths);
    let mut dx = Tensor::zeros(x.shape());
    for ni in 0..n {
        let a: Vec<T> = (0..k).map(|j| grad_out[ni * k + j] / mean[ni * k + j]).collect();
        for p in 0..paths {
            let row = ni * total + p * k;
            let pr = &probs.data()[row..row + k];
            let mut dot = T::zero();
            for j in 0..k {
                dot += a[j] * pr[j];
            }
            for j in 0..k {
                dx[row + j] = pr[j] * (a[j] - dot) / m;
            }
        }
    }
    Ok(dx)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>), TensorError> {
    let [n, k, ..] = logits.dims4();
    if labels.len() != n {
        return Err(TensorError::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Label { label: bad, classes: k });
    }
    let inv_n = T::one() / T::of_usize(n);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let z = &logits.data()[i * k..(i + 1) * k];
        let mx = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in z {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        loss += lse - z[y];
        for j in 0..k {
            let p = (z[j] - lse).exp();
            grad[i * k + j] = (p - if j == y { T::one() } else { T::zero() }) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn pointwise_conv_by_hand() {
        // 1x1 conv, 2 input channels -> 1 output channel on a 2x2 image
        let x = t(&[1, 2, 2, 2], vec![1., 2., 3., 4., 10., 20., 30., 40.]);
        let w = t(&[1, 2, 1, 1], vec![0.5, -0.1]);
        let b = t(&[1], vec![1.0]);
        let geom = ConvGeom {
            kernel: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let y = conv2d_forward(&x, &w, Some(&b), &geom).unwrap();
        // 0.5 * a - 0.1 * b + 1
        let expect = [0.5 - 1.0 + 1.0, 1.0 - 2.0 + 1.0, 1.5 - 3.0 + 1.0, 2.0 - 4.0 + 1.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_3x3_conv_by_hand() {
        // all-ones 3x3 kernel on a 3x3 ramp with zero padding: each output is a neighbourhood sum
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let geom = ConvGeom {
            kernel: 3,
            stride: 1,
            padding: 1,
            groups: 1,
        };
        let y = conv2d_forward(&x, &w, None, &geom).unwrap();
        assert_eq!(y.data(), &[12., 21., 16., 27., 45., 33., 24., 39., 28.]);
        let geom2 = ConvGeom { stride: 2, ..geom };
        let y2 = conv2d_forward(&x, &w, None, &geom2).unwrap();
        assert_eq!(y2.data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let (loss, _) = softmax_xent(&Tensor::<f64>::zeros(&[3, 7]), &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let logits = t(&[1, 3], vec![1000.0, 0.0, -5.0]);
        let (loss, grad) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_xent(&Tensor::<f64>::zeros(&[1, 3]), &[3]),
            Err(TensorError::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn relu_is_nonnegative() {
        let x = t(&[4], vec![-1.0, 0.0, 2.0, -0.0]);
        assert!(relu_forward(&x).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn prob_aggregation_is_log_mean() {
        let x = t(&[1, 4], vec![0.0, 0.0, 2.0, 0.0]);
        let y = aggregate_probs_forward(&x, 2).unwrap();
        let p2 = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((y[0].exp() - (0.5 + p2) / 2.0).abs() < 1e-12);
        assert!((y[0].exp() + y[1].exp() - 1.0).abs() < 1e-12);
    }
}
