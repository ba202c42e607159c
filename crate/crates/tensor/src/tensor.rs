use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};

/// Dense row-major array of `f64`.
///
/// Activations use the `[batch, channel, height, width]` layout. A scalar is
/// a tensor of shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent(shape.to_vec()));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * std;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::ShapeMismatch(format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    pub fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape, other.shape)))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Element `[n, c, y, x]` of a 4-d tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cs, hs, ws] = self.dims4().expect("4-d tensor");
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    /// Contiguous `[h, w]` plane of a 4-d tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let [_, cs, hs, ws] = self.dims4().expect("4-d tensor");
        let hw = hs * ws;
        let start = (n * cs + c) * hw;
        &self.data[start..start + hw]
    }

    /// Concatenates 4-d tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::ShapeMismatch("nothing to concatenate".into()))?
            .dims4()?;
        let [n, _, h, w] = first;
        let mut total_c = 0;
        for p in parts {
            let [pn, pc, ph, pw] = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Tensor::new(&[n, total_c, h, w], data)
    }

    /// Copies channels `[start, start + count)` out of a 4-d tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if count == 0 || start + count > c {
            return Err(TensorError::ShapeMismatch(format!(
                "channel range {start}..{} out of {c}",
                start + count
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * count * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + count * hw]);
        }
        Tensor::new(&[n, count, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { len: 5, .. })
        ));
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(&[2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::new(&[2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let b = Tensor::new(&[2, 2, 2, 2], (10..26).map(f64::from).collect()).unwrap();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 2, 2]);
        assert_eq!(cat.channel_slice(0, 1).unwrap(), a);
        assert_eq!(cat.channel_slice(1, 2).unwrap(), b);
        assert_eq!(cat.at4(1, 0, 0, 0), 4.0);
        assert_eq!(cat.at4(1, 1, 0, 0), 18.0);
    }
}
