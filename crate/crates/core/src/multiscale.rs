//! Test-time multi-scale inference with per-pixel probability averaging.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use liverseg_tensor::{parallel, resize_plane};

use crate::arch::OUTPUT_STRIDE;
use crate::cascade::{CascadeModel, SlicePrediction, Stage};
use crate::error::{Error, Result};
use crate::network::{Class, ProbabilityMap};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub base: usize,
    pub scales: Vec<usize>,
}

impl ScaleSet {
    pub fn new(base: usize, scales: Vec<usize>) -> Result<Self> {
        let s = Self { base, scales };
        s.validate()?;
        Ok(s)
    }

    /// 512 to 640 in steps of 32.
    pub fn full() -> Self {
        Self { base: 512, scales: (512..=640).step_by(32).collect() }
    }

    /// 64 to 96 in steps of 8.
    pub fn desk() -> Self {
        Self { base: 64, scales: (64..=96).step_by(8).collect() }
    }

    pub fn single(base: usize) -> Self {
        Self { base, scales: vec![base] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base == 0 || self.scales.is_empty() {
            return Err(Error::InvalidConfig("scale set needs a base and at least one scale".into()));
        }
        if let Some(s) = self.scales.iter().find(|&&s| s == 0 || s % OUTPUT_STRIDE != 0) {
            return Err(Error::NotDivisible(*s, *s));
        }
        if self.scales.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidConfig(format!("scales {:?} are not strictly increasing", self.scales)));
        }
        Ok(())
    }
}

/// Anything mapping a batch of single-channel slices to liver and lesion
/// probability maps at the same extent.
pub trait SlicePredictor: Sync {
    fn predict_slices(&self, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>>;
}

/// A cascade model evaluated up to a chosen stage.
pub struct StagePredictor<'a> {
    pub model: &'a CascadeModel,
    pub stage: Stage,
}

impl SlicePredictor for StagePredictor<'_> {
    fn predict_slices(&self, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>> {
        self.model.predict(self.stage, images)
    }
}

/// Bilinear resize of a plane; an exact copy when the extent is unchanged.
pub fn resize(plane: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let (sh, sw) = plane.dim();
    let src = plane.as_standard_layout();
    let mut out = vec![0.0; h * w];
    resize_plane(src.as_slice().expect("standard layout"), sh, sw, &mut out, h, w);
    Array2::from_shape_vec((h, w), out).expect("resize extent")
}

/// Sum of `v` by recursive halving.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Per-pixel arithmetic mean. Values at each pixel are sorted before a
/// pairwise sum, so the result does not depend on the order of `maps`.
pub fn fuse(maps: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let first = maps.first().ok_or_else(|| Error::InvalidConfig("nothing to fuse".into()))?;
    let dim = first.dim();
    if let Some(m) = maps.iter().find(|m| m.dim() != dim) {
        return Err(Error::ShapeMismatch(format!("fusing {:?} with {dim:?}", m.dim())));
    }
    let n = maps.len() as f64;
    let mut values = Vec::with_capacity(maps.len());
    Ok(Array2::from_shape_fn(dim, |idx| {
        values.clear();
        values.extend(maps.iter().map(|m| m[idx]));
        values.sort_by(f64::total_cmp);
        (pairwise_sum(&values) / n).clamp(values[0], values[values.len() - 1])
    }))
}

pub fn fuse_maps(maps: &[ProbabilityMap]) -> Result<ProbabilityMap> {
    let class = maps.first().map(|m| m.class).ok_or_else(|| Error::InvalidConfig("nothing to fuse".into()))?;
    if maps.iter().any(|m| m.class != class) {
        return Err(Error::ShapeMismatch("fusing maps of different classes".into()));
    }
    let planes: Vec<&Array2<f64>> = maps.iter().map(|m| &m.values).collect();
    ProbabilityMap::new(fuse(&planes)?, class)
}

/// Predicts every slice at every scale, resizes the maps back to the slice
/// extent and averages them.
pub fn multiscale_predict<P: SlicePredictor>(
    predictor: &P,
    images: &[Array2<f64>],
    scales: &ScaleSet,
) -> Result<Vec<SlicePrediction>> {
    scales.validate()?;
    let per_scale: Vec<Result<Vec<SlicePrediction>>> = parallel::map_slice(&scales.scales, |_, &s| {
        let resized: Vec<Array2<f64>> = images.iter().map(|i| resize(i, s, s)).collect();
        let preds = predictor.predict_slices(&resized)?;
        preds
            .into_iter()
            .zip(images)
            .map(|(p, i)| {
                let (h, w) = i.dim();
                Ok(SlicePrediction {
                    liver: ProbabilityMap::new(resize(&p.liver.values, h, w), Class::Liver)?,
                    lesion: ProbabilityMap::new(resize(&p.lesion.values, h, w), Class::Lesion)?,
                })
            })
            .collect()
    });
    let per_scale = per_scale.into_iter().collect::<Result<Vec<_>>>()?;
    (0..images.len())
        .map(|i| {
            let liver: Vec<&Array2<f64>> = per_scale.iter().map(|p| &p[i].liver.values).collect();
            let lesion: Vec<&Array2<f64>> = per_scale.iter().map(|p| &p[i].lesion.values).collect();
            Ok(SlicePrediction {
                liver: ProbabilityMap::new(fuse(&liver)?, Class::Liver)?,
                lesion: ProbabilityMap::new(fuse(&lesion)?, Class::Lesion)?,
            })
        })
        .collect()
}
