//! 2-d convolution by patch gathering (im2col) and a dense matrix product.

use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `dilation * (k - 1) / 2` on each side.
    Same,
    /// Explicit `(rows, cols)` of zero padding per side.
    Explicit(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Square `kernel x kernel`, stride 1, dilation 1, same padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
            in_channels,
            out_channels,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::InvalidParams(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(TensorError::InvalidParams(format!("stride {} not in {{1, 2}}", self.stride)));
        }
        if self.dilation == 0 {
            return Err(TensorError::InvalidParams("dilation must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::InvalidParams("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn pads(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => (
                self.dilation * (self.kernel.0 - 1) / 2,
                self.dilation * (self.kernel.1 - 1) / 2,
            ),
            Padding::Explicit(ph, pw) => (ph, pw),
        }
    }

    /// `floor((H + 2 pad - dilation (k - 1) - 1) / stride) + 1` per axis.
    pub fn output_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pads();
        let axis = |len: usize, pad: usize, k: usize| -> Option<usize> {
            let span = self.dilation * (k - 1) + 1;
            (len + 2 * pad).checked_sub(span).map(|room| room / self.stride + 1)
        };
        match (axis(height, ph, self.kernel.0), axis(width, pw, self.kernel.1)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(TensorError::EmptyOutput { height, width }),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }
}

/// One kernel position and the output rows/cols for which it reads inside
/// the input.
#[derive(Clone, Debug)]
struct Tap {
    ky: usize,
    kx: usize,
    off_y: isize,
    off_x: isize,
    rows: (usize, usize),
    cols: (usize, usize),
}

/// Shape bookkeeping shared by the forward and backward passes.
///
/// Kernel positions that never overlap the input (large dilations on small
/// maps) are dropped from the patch matrix; their weights see only zero
/// padding, so the product and the gradient are unchanged.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    taps: Vec<Tap>,
    pointwise: bool,
}

fn ceil_div(a: isize, b: isize) -> isize {
    (a + b - 1).div_euclid(b)
}

/// Output indices `o` in `[0, out)` with `0 <= o * stride + offset < len`.
fn valid_range(out: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ceil_div(-offset, s) };
    let hi = ceil_div(len as isize - offset, s).clamp(0, out as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl ConvGeometry {
    pub(crate) fn new(x_shape: &[usize], w_shape: &[usize], p: &ConvParams) -> Result<Self> {
        p.validate()?;
        let [batch, cin, h, w] = match x_shape {
            &[n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(TensorError::ShapeMismatch(format!("conv2d input must be 4-d, got {x_shape:?}")))
            }
        };
        if cin != p.in_channels {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input has {cin} channels, parameters expect {}",
                p.in_channels
            )));
        }
        if w_shape != p.weight_shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d weight {w_shape:?}, expected {:?}",
                p.weight_shape()
            )));
        }
        let (oh, ow) = p.output_extent(h, w)?;
        let (ph, pw) = p.pads();
        let (kh, kw) = p.kernel;
        let mut taps = Vec::with_capacity(kh * kw);
        for ky in 0..kh {
            let off_y = (ky * p.dilation) as isize - ph as isize;
            let rows = valid_range(oh, p.stride, off_y, h);
            for kx in 0..kw {
                let off_x = (kx * p.dilation) as isize - pw as isize;
                let cols = valid_range(ow, p.stride, off_x, w);
                if rows.0 < rows.1 && cols.0 < cols.1 {
                    taps.push(Tap { ky, kx, off_y, off_x, rows, cols });
                }
            }
        }
        let pointwise = kh == 1 && kw == 1 && p.stride == 1 && ph == 0 && pw == 0;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout: p.out_channels,
            kh,
            kw,
            stride: p.stride,
            oh,
            ow,
            taps,
            pointwise,
        })
    }

    pub(crate) fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.oh, self.ow]
    }

    fn full_taps(&self) -> bool {
        self.taps.len() == self.kh * self.kw
    }

    /// Rows of the patch matrix.
    fn patch_len(&self) -> usize {
        self.cin * self.taps.len()
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ohw = self.oh * self.ow;
        let hw = self.h * self.w;
        let ntaps = self.taps.len();
        let mut cols = vec![0.0; self.patch_len() * ohw];
        for c in 0..self.cin {
            let plane = &x[c * hw..(c + 1) * hw];
            for (t, tap) in self.taps.iter().enumerate() {
                let row = &mut cols[(c * ntaps + t) * ohw..(c * ntaps + t + 1) * ohw];
                for oy in tap.rows.0..tap.rows.1 {
                    let iy = (oy * self.stride) as isize + tap.off_y;
                    let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                    let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                    if self.stride == 1 {
                        let lo = (tap.cols.0 as isize + tap.off_x) as usize;
                        let hi = (tap.cols.1 as isize + tap.off_x) as usize;
                        dst[tap.cols.0..tap.cols.1].copy_from_slice(&src[lo..hi]);
                    } else {
                        for ox in tap.cols.0..tap.cols.1 {
                            dst[ox] = src[((ox * self.stride) as isize + tap.off_x) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ohw = self.oh * self.ow;
        let hw = self.h * self.w;
        let ntaps = self.taps.len();
        for c in 0..self.cin {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for (t, tap) in self.taps.iter().enumerate() {
                let row = &cols[(c * ntaps + t) * ohw..(c * ntaps + t + 1) * ohw];
                for oy in tap.rows.0..tap.rows.1 {
                    let iy = ((oy * self.stride) as isize + tap.off_y) as usize;
                    let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                    for ox in tap.cols.0..tap.cols.1 {
                        let ix = ((ox * self.stride) as isize + tap.off_x) as usize;
                        dst[ix] += row[oy * self.ow + ox];
                    }
                }
            }
        }
    }

    /// Weight matrix `[cout, cin * taps]` restricted to the active taps.
    fn gather_weights<'a>(&self, w: &'a [f64]) -> Cow<'a, [f64]> {
        if self.full_taps() {
            return Cow::Borrowed(w);
        }
        let k = self.patch_len();
        let ntaps = self.taps.len();
        let mut out = vec![0.0; self.cout * k];
        for co in 0..self.cout {
            for c in 0..self.cin {
                for (t, tap) in self.taps.iter().enumerate() {
                    out[co * k + c * ntaps + t] = w[((co * self.cin + c) * self.kh + tap.ky) * self.kw + tap.kx];
                }
            }
        }
        Cow::Owned(out)
    }

    fn scatter_weights(&self, wg: Vec<f64>) -> Vec<f64> {
        if self.full_taps() {
            return wg;
        }
        let k = self.patch_len();
        let ntaps = self.taps.len();
        let mut out = vec![0.0; self.cout * self.cin * self.kh * self.kw];
        for co in 0..self.cout {
            for c in 0..self.cin {
                for (t, tap) in self.taps.iter().enumerate() {
                    out[((co * self.cin + c) * self.kh + tap.ky) * self.kw + tap.kx] = wg[co * k + c * ntaps + t];
                }
            }
        }
        out
    }
}

/// Patch matrices saved by the forward pass, one per batch element.
pub(crate) type PatchCache = Option<Vec<Vec<f64>>>;

pub(crate) fn forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: &ConvParams,
    keep_patches: bool,
) -> Result<(Tensor, ConvGeometry, PatchCache)> {
    let geom = ConvGeometry::new(x.shape(), weight.shape(), p)?;
    if let Some(b) = bias {
        if b.shape() != [geom.cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias {:?}, expected [{}]",
                b.shape(),
                geom.cout
            )));
        }
    }
    let wg = geom.gather_weights(weight.data());
    let k = geom.patch_len();
    let ohw = geom.oh * geom.ow;
    let sample_len = geom.cin * geom.h * geom.w;
    let keep = keep_patches && !geom.pointwise;

    let per_sample = parallel::map_range(geom.batch, |n| {
        let xs = &x.data()[n * sample_len..(n + 1) * sample_len];
        let mut out = vec![0.0; geom.cout * ohw];
        let patches = (!geom.pointwise).then(|| geom.im2col(xs));
        let cols: &[f64] = patches.as_deref().unwrap_or(xs);
        gemm(geom.cout, k, ohw, &wg, false, cols, false, 0.0, &mut out);
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(ohw).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let saved = if keep { patches } else { None };
        (out, saved)
    });

    let mut data = Vec::with_capacity(geom.batch * geom.cout * ohw);
    let mut cache = keep.then(|| Vec::with_capacity(geom.batch));
    for (out, saved) in per_sample {
        data.extend_from_slice(&out);
        if let (Some(c), Some(s)) = (cache.as_mut(), saved) {
            c.push(s);
        }
    }
    let y = Tensor::new(&geom.output_shape(), data)?;
    Ok((y, geom, cache))
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn backward(
    geom: &ConvGeometry,
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    cache: Option<&[Vec<f64>]>,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let (need_dx, need_dw, need_db) = need;
    let wg = geom.gather_weights(weight.data());
    let k = geom.patch_len();
    let ohw = geom.oh * geom.ow;
    let sample_len = geom.cin * geom.h * geom.w;

    let per_sample = parallel::map_range(geom.batch, |n| {
        let xs = &x.data()[n * sample_len..(n + 1) * sample_len];
        let dys = &dy.data()[n * geom.cout * ohw..(n + 1) * geom.cout * ohw];
        let dw = need_dw.then(|| {
            let recomputed: Vec<f64>;
            let cols: &[f64] = match cache {
                _ if geom.pointwise => xs,
                Some(c) => &c[n],
                None => {
                    recomputed = geom.im2col(xs);
                    &recomputed
                }
            };
            let mut dwg = vec![0.0; geom.cout * k];
            gemm(geom.cout, ohw, k, dys, false, cols, true, 0.0, &mut dwg);
            dwg
        });
        let dx = need_dx.then(|| {
            if geom.pointwise {
                let mut dx = vec![0.0; sample_len];
                gemm(geom.cin, geom.cout, ohw, &wg, true, dys, false, 0.0, &mut dx);
                dx
            } else {
                let mut dcols = vec![0.0; k * ohw];
                gemm(k, geom.cout, ohw, &wg, true, dys, false, 0.0, &mut dcols);
                let mut dx = vec![0.0; sample_len];
                geom.col2im(&dcols, &mut dx);
                dx
            }
        });
        (dx, dw)
    });

    let mut dx_data = need_dx.then(|| Vec::with_capacity(geom.batch * sample_len));
    let mut dwg_sum = need_dw.then(|| vec![0.0; geom.cout * k]);
    for (dx, dw) in per_sample {
        if let (Some(acc), Some(d)) = (dx_data.as_mut(), dx) {
            acc.extend_from_slice(&d);
        }
        if let (Some(acc), Some(d)) = (dwg_sum.as_mut(), dw) {
            acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
    }

    let db = need_db.then(|| {
        let mut db = vec![0.0; geom.cout];
        for n in 0..geom.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (n * geom.cout + co) * ohw;
                *acc += dy.data()[start..start + ohw].iter().sum::<f64>();
            }
        }
        db
    });

    Ok(ConvGrads {
        dx: dx_data.map(|d| Tensor::new(&[geom.batch, geom.cin, geom.h, geom.w], d)).transpose()?,
        dw: dwg_sum.map(|d| Tensor::new(weight.shape(), geom.scatter_weights(d))).transpose()?,
        db: db.map(|d| Tensor::new(&[geom.cout], d)).transpose()?,
    })
}

/// 2-d convolution of `x: [N, Cin, H, W]` with `weight: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: &ConvParams) -> Result<Tensor> {
    let (y, _, _) = forward(x, weight, bias, p, false)?;
    y.ensure_finite("conv2d")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, independent of the patch gather.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, p: &ConvParams) -> Tensor {
        let [n, cin, h, wd] = x.dims4().unwrap();
        let (oh, ow) = p.output_extent(h, wd).unwrap();
        let (ph, pw) = p.pads();
        let (kh, kw) = p.kernel;
        let mut out = Tensor::zeros(&[n, p.out_channels, oh, ow]);
        for b_ in 0..n {
            for co in 0..p.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky * p.dilation) as isize - ph as isize;
                                    let ix = (ox * p.stride + kx * p.dilation) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at4(b_, ci, iy as usize, ix as usize)
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((b_ * p.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_center_sums_nine() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &ConvParams::new(1, 1, 3)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 1, 7, 5], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        for d in [1, 2, 5] {
            let p = ConvParams::new(1, 1, 3).with_dilation(d);
            let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), &p).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn stride_two_halves_table_extent() {
        let p = ConvParams::new(64, 128, 3).with_stride(2);
        assert_eq!(p.output_extent(504, 504).unwrap(), (252, 252));
        assert_eq!(p.output_extent(63, 63).unwrap(), (32, 32));
        for d in [1, 2, 4, 12] {
            let p = ConvParams::new(1, 1, 3).with_dilation(d);
            assert_eq!(p.output_extent(63, 17).unwrap(), (63, 17));
        }
    }

    #[test]
    fn matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ConvParams::new(3, 4, 3),
            ConvParams::new(3, 4, 3).with_stride(2),
            ConvParams::new(3, 4, 3).with_dilation(2),
            ConvParams::new(3, 4, 3).with_dilation(12),
            ConvParams::new(3, 4, 1),
            ConvParams::new(3, 4, 1).with_stride(2),
            ConvParams::new(3, 2, 3).with_padding(Padding::Explicit(0, 1)),
        ];
        for p in cases {
            let x = Tensor::randn(&[2, 3, 9, 8], 1.0, &mut rng);
            let w = Tensor::randn(&p.weight_shape(), 1.0, &mut rng);
            let b = Tensor::randn(&[p.out_channels], 1.0, &mut rng);
            let fast = conv2d(&x, &w, Some(&b), &p).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), &p);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn rejects_bad_shapes_and_params() {
        let x = Tensor::ones(&[1, 2, 4, 4]);
        let w = Tensor::ones(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, &ConvParams::new(3, 1, 3)),
            Err(TensorError::ShapeMismatch(_))
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::ones(&[1, 2, 2, 2]), None, &ConvParams::new(2, 1, 2)),
            Err(TensorError::InvalidParams(_))
        ));
        assert!(matches!(
            conv2d(&x, &w, None, &ConvParams::new(2, 1, 3).with_stride(3)),
            Err(TensorError::InvalidParams(_))
        ));
        let tiny = ConvParams::new(2, 1, 3).with_dilation(4).with_padding(Padding::Explicit(0, 0));
        assert!(matches!(conv2d(&x, &w, None, &tiny), Err(TensorError::EmptyOutput { .. })));
    }
}
