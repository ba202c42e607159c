//! Forward and backward kernels for the non-convolution operations.

use crate::error::{Result, TensorError};
use crate::parallel;
use crate::tensor::Tensor;

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance floor for batch normalization.
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) struct BnForward {
    pub y: Tensor,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    let c = dims[1];
    if gamma.shape() != [c] || beta.shape() != [c] || stats.channels() != c {
        return Err(TensorError::ShapeMismatch(format!(
            "batch_norm over {c} channels with gamma {:?}, beta {:?}, {} running channels",
            gamma.shape(),
            beta.shape(),
            stats.channels()
        )));
    }
    Ok(dims)
}

/// Normalizes every `(n, c)` plane with per-channel `(mean, inv_std)`.
fn bn_apply(x: &Tensor, dims: [usize; 4], gamma: &[f64], beta: &[f64], mean: &[f64], inv_std: &[f64]) -> BnForward {
    let [_, c, h, w] = dims;
    let hw = h * w;
    let mut xhat = x.data().to_vec();
    parallel::for_each_chunk_mut(&mut xhat, hw, |plane, chunk| {
        let ch = plane % c;
        chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
    });
    let mut y = xhat.clone();
    parallel::for_each_chunk_mut(&mut y, hw, |plane, chunk| {
        let ch = plane % c;
        chunk.iter_mut().for_each(|v| *v = gamma[ch] * *v + beta[ch]);
    });
    BnForward {
        y: Tensor::new(x.shape(), y).expect("same shape"),
        xhat,
        inv_std: inv_std.to_vec(),
    }
}

/// Per-channel sums over `(n, h, w)` of `f(index)`, in a fixed order.
fn channel_sums<F>(dims: [usize; 4], f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let [n, c, h, w] = dims;
    let hw = h * w;
    parallel::map_range(c, |ch| {
        let mut acc = 0.0;
        for b in 0..n {
            let start = (b * c + ch) * hw;
            for i in start..start + hw {
                acc += f(i);
            }
        }
        acc
    })
}

pub(crate) fn bn_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
) -> Result<BnForward> {
    let dims = check_bn(x, gamma, beta, stats)?;
    let [n, _, h, w] = dims;
    let count = n * h * w;
    if count == 0 {
        return Err(TensorError::EmptyBatch);
    }
    let m = count as f64;
    let data = x.data();
    let mean: Vec<f64> = channel_sums(dims, |i| data[i]).into_iter().map(|s| s / m).collect();
    let var: Vec<f64> = {
        let mean = &mean;
        let c = dims[1];
        let hw = h * w;
        channel_sums(dims, |i| {
            let d = data[i] - mean[(i / hw) % c];
            d * d
        })
        .into_iter()
        .map(|s| s / m)
        .collect()
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.epsilon).sqrt()).collect();
    let unbias = if count > 1 { m / (m - 1.0) } else { 1.0 };
    let mom = stats.momentum;
    for ch in 0..stats.channels() {
        stats.mean[ch] = (1.0 - mom) * stats.mean[ch] + mom * mean[ch];
        stats.var[ch] = (1.0 - mom) * stats.var[ch] + mom * var[ch] * unbias;
    }
    Ok(bn_apply(x, dims, gamma.data(), beta.data(), &mean, &inv_std))
}

pub(crate) fn bn_forward_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &RunningStats) -> Result<BnForward> {
    let dims = check_bn(x, gamma, beta, stats)?;
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + stats.epsilon).sqrt()).collect();
    Ok(bn_apply(x, dims, gamma.data(), beta.data(), &stats.mean, &inv_std))
}

/// Gradients `(dx, dgamma, dbeta)` of batch normalization.
pub(crate) fn bn_backward(
    dy: &Tensor,
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dims = dy.dims4()?;
    let [n, c, h, w] = dims;
    let hw = h * w;
    let g = dy.data();
    let dbeta = channel_sums(dims, |i| g[i]);
    let dgamma = channel_sums(dims, |i| g[i] * xhat[i]);
    let m = (n * hw) as f64;
    let gm = gamma.data();
    let mut dx = g.to_vec();
    parallel::for_each_chunk_mut(&mut dx, hw, |plane, chunk| {
        let ch = plane % c;
        let base = plane * hw;
        let scale = gm[ch] * inv_std[ch];
        match mode {
            Mode::Train => {
                for (i, v) in chunk.iter_mut().enumerate() {
                    *v = scale / m * (m * *v - dbeta[ch] - xhat[base + i] * dgamma[ch]);
                }
            }
            Mode::Eval => chunk.iter_mut().for_each(|v| *v *= scale),
        }
    });
    Ok((Tensor::new(dy.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// Batch normalization over the channel axis of a 4-d tensor.
///
/// Train mode normalizes with batch statistics and folds them into `stats`;
/// eval mode normalizes with `stats` and leaves it untouched.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, stats: &mut RunningStats, mode: Mode) -> Result<Tensor> {
    let out = match mode {
        Mode::Train => bn_forward_train(x, gamma, beta, stats)?,
        Mode::Eval => bn_forward_eval(x, gamma, beta, stats)?,
    };
    out.y.ensure_finite("batch_norm")
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.same_shape(y, "add")?;
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape(), data)?.ensure_finite("add")
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    x.same_shape(y, "mul")?;
    let data = x.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
    Tensor::new(x.shape(), data)?.ensure_finite("mul")
}

/// Source index pair and interpolation weight for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Sample {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center sampling positions for resizing `src` to `dst`.
fn sample_axis(src: usize, dst: usize) -> Vec<Sample> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if lo == src - 1 { 0.0 } else { pos - lo as f64 };
            Sample { lo, hi, frac }
        })
        .collect()
}

/// Bilinearly resamples one `src_h x src_w` plane into `out`.
pub fn resize_plane(src: &[f64], src_h: usize, src_w: usize, out: &mut [f64], out_h: usize, out_w: usize) {
    debug_assert_eq!(src.len(), src_h * src_w);
    debug_assert_eq!(out.len(), out_h * out_w);
    if (src_h, src_w) == (out_h, out_w) {
        out.copy_from_slice(src);
        return;
    }
    let ys = sample_axis(src_h, out_h);
    let xs = sample_axis(src_w, out_w);
    for (oy, sy) in ys.iter().enumerate() {
        let r0 = &src[sy.lo * src_w..(sy.lo + 1) * src_w];
        let r1 = &src[sy.hi * src_w..(sy.hi + 1) * src_w];
        for (ox, sx) in xs.iter().enumerate() {
            let top = r0[sx.lo] + sx.frac * (r0[sx.hi] - r0[sx.lo]);
            let bottom = r1[sx.lo] + sx.frac * (r1[sx.hi] - r1[sx.lo]);
            out[oy * out_w + ox] = top + sy.frac * (bottom - top);
        }
    }
}

fn resize_plane_backward(dy: &[f64], out_h: usize, out_w: usize, dx: &mut [f64], src_h: usize, src_w: usize) {
    let ys = sample_axis(src_h, out_h);
    let xs = sample_axis(src_w, out_w);
    for (oy, sy) in ys.iter().enumerate() {
        for (ox, sx) in xs.iter().enumerate() {
            let g = dy[oy * out_w + ox];
            let (wy0, wy1) = (1.0 - sy.frac, sy.frac);
            let (wx0, wx1) = (1.0 - sx.frac, sx.frac);
            dx[sy.lo * src_w + sx.lo] += g * wy0 * wx0;
            dx[sy.lo * src_w + sx.hi] += g * wy0 * wx1;
            dx[sy.hi * src_w + sx.lo] += g * wy1 * wx0;
            dx[sy.hi * src_w + sx.hi] += g * wy1 * wx1;
        }
    }
}

/// Bilinear resize of every `(n, c)` plane with half-pixel centers.
///
/// Resizing to the current extent returns an exact copy.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::ShapeMismatch(format!("resize target {out_h}x{out_w}")));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mut out = vec![0.0; n * c * out_h * out_w];
    let src = x.data();
    parallel::for_each_chunk_mut(&mut out, out_h * out_w, |plane, chunk| {
        resize_plane(&src[plane * h * w..(plane + 1) * h * w], h, w, chunk, out_h, out_w);
    });
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub(crate) fn bilinear_resize_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = dy.dims4()?;
    if (oh, ow) == (in_h, in_w) {
        return Ok(dy.clone());
    }
    let mut dx = vec![0.0; n * c * in_h * in_w];
    let g = dy.data();
    parallel::for_each_chunk_mut(&mut dx, in_h * in_w, |plane, chunk| {
        resize_plane_backward(&g[plane * oh * ow..(plane + 1) * oh * ow], oh, ow, chunk, in_h, in_w);
    });
    Tensor::new(&[n, c, in_h, in_w], dx)
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = x.dims4()?;
    if c < 2 {
        return Err(TensorError::ShapeMismatch(format!("softmax over {c} channel(s)")));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    parallel::for_each_chunk_mut(&mut out, c * hw, |_, sample| {
        for p in 0..hw {
            let max = (0..c).map(|ch| sample[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (sample[ch * hw + p] - max).exp();
                sample[ch * hw + p] = e;
                total += e;
            }
            for ch in 0..c {
                sample[ch * hw + p] /= total;
            }
        }
    });
    Tensor::new(x.shape(), out)?.ensure_finite("softmax_channels")
}

pub(crate) fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let [_, c, h, w] = y.dims4()?;
    let hw = h * w;
    let yd = y.data();
    let mut dx = dy.data().to_vec();
    parallel::for_each_chunk_mut(&mut dx, c * hw, |n, sample| {
        let ys = &yd[n * c * hw..(n + 1) * c * hw];
        for p in 0..hw {
            let dot: f64 = (0..c).map(|ch| ys[ch * hw + p] * sample[ch * hw + p]).sum();
            for ch in 0..c {
                sample[ch * hw + p] = ys[ch * hw + p] * (sample[ch * hw + p] - dot);
            }
        }
    });
    Tensor::new(y.shape(), dx)
}

/// Validates `labels: [N, H, W]` against `logits: [N, C, H, W]` and returns
/// class indices.
pub(crate) fn class_indices(logits: &Tensor, labels: &Tensor) -> Result<Vec<usize>> {
    let [n, c, h, w] = logits.dims4()?;
    if labels.shape() != [n, h, w] {
        return Err(TensorError::ShapeMismatch(format!(
            "labels {:?} for logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    labels
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < c {
                Ok(v as usize)
            } else {
                Err(TensorError::InvalidLabel(v))
            }
        })
        .collect()
}

/// Mean per-pixel softmax cross-entropy and the softmax probabilities.
pub(crate) fn cross_entropy_forward(logits: &Tensor, classes: &[usize]) -> Result<(f64, Tensor)> {
    let probs = softmax_channels(logits)?;
    let [n, c, h, w] = logits.dims4()?;
    let hw = h * w;
    let z = logits.data();
    let per_sample = parallel::map_range(n, |b| {
        let mut acc = 0.0;
        for p in 0..hw {
            let at = |ch: usize| z[(b * c + ch) * hw + p];
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ch| (at(ch) - max).exp()).sum::<f64>().ln();
            acc += lse - at(classes[b * hw + p]);
        }
        acc
    });
    let loss = per_sample.iter().sum::<f64>() / (n * hw) as f64;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("cross_entropy_loss"));
    }
    Ok((loss.max(0.0), probs))
}

pub(crate) fn cross_entropy_backward(probs: &Tensor, classes: &[usize], upstream: f64) -> Result<Tensor> {
    let [n, c, h, w] = probs.dims4()?;
    let hw = h * w;
    let scale = upstream / (n * hw) as f64;
    let mut dx = probs.data().to_vec();
    for b in 0..n {
        for p in 0..hw {
            dx[(b * c + classes[b * hw + p]) * hw + p] -= 1.0;
        }
    }
    dx.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(probs.shape(), dx)
}

/// Mean over all pixels of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let classes = class_indices(logits, labels)?;
    Ok(cross_entropy_forward(logits, &classes)?.0)
}
