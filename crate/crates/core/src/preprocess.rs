//! HU windowing, axial slicing, balanced slice selection and augmentation.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use liverseg_tensor::resize_plane;

use crate::error::{Error, Result};
use crate::phantom::stream_rng;
use crate::volume::{LabelVolume, Volume, LESION, LIVER};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lo: f64,
    pub hi: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { lo: -160.0, hi: 240.0 }
    }
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let w = Self { lo, hi };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("window [{}, {}] is empty", self.lo, self.hi)))
        }
    }

    /// Maps one HU value into `[0, 1]`.
    pub fn apply(&self, hu: f64) -> f64 {
        (hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }

    /// The affine inverse on the interior of the window.
    pub fn invert(&self, value: f64) -> f64 {
        self.lo + value * (self.hi - self.lo)
    }
}

pub fn window_and_normalize(v: &Volume, w: &WindowSpec) -> Array3<f64> {
    v.voxels().mapv(|hu| w.apply(f64::from(hu)))
}

/// One axial slice with its binary targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f64>,
    /// Label 1 or 2.
    pub liver: Array2<bool>,
    /// Label 2.
    pub lesion: Array2<bool>,
    /// `(volume id, z index)`.
    pub source: (usize, usize),
}

/// What a slice contains, for balanced selection.
pub trait SliceContent {
    fn has_liver(&self) -> bool;
    fn has_lesion(&self) -> bool;
}

impl SliceContent for SliceSample {
    fn has_liver(&self) -> bool {
        self.liver.iter().any(|&b| b)
    }

    fn has_lesion(&self) -> bool {
        self.lesion.iter().any(|&b| b)
    }
}

/// Slice presence flags without pixel data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub has_liver: bool,
    pub has_lesion: bool,
}

impl SliceContent for SliceMeta {
    fn has_liver(&self) -> bool {
        self.has_liver
    }

    fn has_lesion(&self) -> bool {
        self.has_lesion
    }
}

impl From<&SliceSample> for SliceMeta {
    fn from(s: &SliceSample) -> Self {
        Self { has_liver: s.has_liver(), has_lesion: s.has_lesion() }
    }
}

pub fn extract_slices(
    volume_id: usize,
    v: &Volume,
    labels: &LabelVolume,
    w: &WindowSpec,
) -> Result<Vec<SliceSample>> {
    if v.dim() != labels.dim() {
        return Err(Error::ShapeMismatch(format!("volume {:?} vs labels {:?}", v.dim(), labels.dim())));
    }
    let image = window_and_normalize(v, w);
    Ok((0..v.dim().0)
        .map(|z| {
            let l = labels.labels().index_axis(Axis(0), z);
            SliceSample {
                image: image.index_axis(Axis(0), z).to_owned(),
                liver: l.mapv(|x| x == LIVER || x == LESION),
                lesion: l.mapv(|x| x == LESION),
                source: (volume_id, z),
            }
        })
        .collect())
}

/// Picks `n / 2` slices showing liver and lesion plus `n / 2` showing
/// neither. Slices with liver but no lesion are never chosen. Returns pool
/// indices in ascending order.
pub fn select_training_slices<T: SliceContent>(pool: &[T], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n % 2 == 1 {
        return Err(Error::InvalidConfig(format!("slice count {n} must be even and positive")));
    }
    let half = n / 2;
    let mut both: Vec<usize> = Vec::new();
    let mut neither: Vec<usize> = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        match (s.has_liver(), s.has_lesion()) {
            (true, true) => both.push(i),
            (false, false) => neither.push(i),
            _ => {}
        }
    }
    for (kind, group) in [("liver-and-lesion", &both), ("empty", &neither)] {
        if group.len() < half {
            return Err(Error::InsufficientSlices { kind, needed: half, available: group.len() });
        }
    }
    let mut rng = stream_rng(seed, 0);
    both.shuffle(&mut rng);
    neither.shuffle(&mut rng);
    let mut chosen: Vec<usize> = both[..half].iter().chain(&neither[..half]).copied().collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    pub flip_probability: f64,
    pub crop_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_range: [0.8, 1.2], flip_probability: 0.5, crop_size: 48 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("scale range {:?}", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig(format!("flip probability {}", self.flip_probability)));
        }
        if self.crop_size == 0 {
            return Err(Error::InvalidConfig("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// One draw of the augmentation transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

fn scaled_extent(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

impl AugmentParams {
    /// The transform that only crops at the origin.
    pub fn identity() -> Self {
        Self { scale: 1.0, crop_y: 0, crop_x: 0, flip: false }
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [lo, hi] = cfg.scale_range;
        if scaled_extent(height.min(width), lo) < cfg.crop_size {
            return Err(Error::CropTooLarge { crop: cfg.crop_size, height, width, min_scale: lo });
        }
        let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let (sh, sw) = (scaled_extent(height, scale), scaled_extent(width, scale));
        let crop_y = rng.random_range(0..=sh - cfg.crop_size);
        let crop_x = rng.random_range(0..=sw - cfg.crop_size);
        let flip = rng.random_bool(cfg.flip_probability);
        Ok(Self { scale, crop_y, crop_x, flip })
    }

    fn check(&self, height: usize, width: usize, crop: usize) -> Result<(usize, usize)> {
        let (sh, sw) = (scaled_extent(height, self.scale), scaled_extent(width, self.scale));
        if self.crop_y + crop > sh || self.crop_x + crop > sw {
            return Err(Error::CropTooLarge { crop, height, width, min_scale: self.scale });
        }
        Ok((sh, sw))
    }

    /// Bilinear rescale, crop, then optional horizontal flip.
    pub fn apply_continuous(&self, plane: ArrayView2<f64>, crop: usize) -> Result<Array2<f64>> {
        let (h, w) = plane.dim();
        let (sh, sw) = self.check(h, w, crop)?;
        let src = plane.as_standard_layout();
        let mut scaled = vec![0.0; sh * sw];
        resize_plane(src.as_slice().expect("standard layout"), h, w, &mut scaled, sh, sw);
        let scaled = Array2::from_shape_vec((sh, sw), scaled).expect("resize extent");
        Ok(self.crop_and_flip(scaled.view(), crop))
    }

    /// Nearest-neighbour rescale, crop, then optional horizontal flip.
    pub fn apply_labels(&self, plane: ArrayView2<bool>, crop: usize) -> Result<Array2<bool>> {
        let (h, w) = plane.dim();
        let (sh, sw) = self.check(h, w, crop)?;
        let ys = nearest_indices(h, sh);
        let xs = nearest_indices(w, sw);
        let scaled = Array2::from_shape_fn((sh, sw), |(y, x)| plane[[ys[y], xs[x]]]);
        Ok(self.crop_and_flip(scaled.view(), crop))
    }

    fn crop_and_flip<T: Clone>(&self, plane: ArrayView2<T>, crop: usize) -> Array2<T> {
        let view = plane.slice(s![self.crop_y..self.crop_y + crop, self.crop_x..self.crop_x + crop]);
        if self.flip {
            view.slice(s![.., ..;-1]).to_owned()
        } else {
            view.to_owned()
        }
    }
}

/// Source index of each output pixel under nearest-neighbour resampling
/// with pixel-center alignment.
pub fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)).collect()
}

/// Applies one random transform to the image and both label planes.
pub fn augment<R: Rng + ?Sized>(sample: &SliceSample, rng: &mut R, cfg: &AugmentConfig) -> Result<SliceSample> {
    let (h, w) = sample.image.dim();
    let p = AugmentParams::sample(cfg, h, w, rng)?;
    augment_with(sample, &p, cfg.crop_size)
}

pub fn augment_with(sample: &SliceSample, p: &AugmentParams, crop: usize) -> Result<SliceSample> {
    Ok(SliceSample {
        image: p.apply_continuous(sample.image.view(), crop)?,
        liver: p.apply_labels(sample.liver.view(), crop)?,
        lesion: p.apply_labels(sample.lesion.view(), crop)?,
        source: sample.source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn window_anchor_values() {
        let w = WindowSpec::default();
        assert_eq!(w.apply(-160.0), 0.0);
        assert_eq!(w.apply(240.0), 1.0);
        assert_eq!(w.apply(40.0), 0.5);
        assert_eq!(w.apply(-1000.0), 0.0);
        assert_eq!(w.apply(3000.0), 1.0);
    }

    #[test]
    fn invalid_window_rejected() {
        assert!(WindowSpec::new(10.0, 10.0).is_err());
        assert!(WindowSpec::new(10.0, -5.0).is_err());
    }

    #[test]
    fn nearest_indices_identity_and_halving() {
        assert_eq!(nearest_indices(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(nearest_indices(8, 4), vec![1, 3, 5, 7]);
    }

    #[test]
    fn slices_follow_depth_order() {
        let v = Volume::new(Array3::from_shape_fn((5, 3, 3), |(z, _, _)| z as i16 * 10), [1.0; 3]).unwrap();
        let l = LabelVolume::new(Array3::zeros((5, 3, 3)), [1.0; 3]).unwrap();
        let s = extract_slices(9, &v, &l, &WindowSpec::default()).unwrap();
        assert_eq!(s.len(), 5);
        for (z, sample) in s.iter().enumerate() {
            assert_eq!(sample.source, (9, z));
            assert_eq!(sample.image[[0, 0]], (z as f64 * 10.0 + 160.0) / 400.0);
            assert!(!sample.has_liver() && !sample.has_lesion());
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let v = Volume::new(Array3::zeros((2, 3, 3)), [1.0; 3]).unwrap();
        let l = LabelVolume::new(Array3::zeros((2, 3, 4)), [1.0; 3]).unwrap();
        assert!(matches!(extract_slices(0, &v, &l, &WindowSpec::default()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn crop_too_large_detected_upfront() {
        let cfg = AugmentConfig { crop_size: 60, ..AugmentConfig::default() };
        let mut rng = stream_rng(0, 0);
        assert!(matches!(AugmentParams::sample(&cfg, 64, 64, &mut rng), Err(Error::CropTooLarge { .. })));
    }
}
