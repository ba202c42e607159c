//! Synthetic abdominal CT phantoms with analytic ground truth.
//!
//! A phantom is an elliptic body cylinder of soft tissue in air, a liver
//! ellipsoid inside it, and spherical hypodense lesions inside the liver.
//! Membership is decided per voxel center, so labels are exact.

use ndarray::Array3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume, HU_MAX, HU_MIN, LESION, LIVER};

/// Placement attempts per lesion before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

const STREAM_GEOMETRY: u64 = 1;
const STREAM_LESIONS: u64 = 2;
const STREAM_NOISE: u64 = 3;

/// A ChaCha8 stream keyed by `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// An independent seed for the component named by `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    stream_rng(seed, tag).next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuMeans {
    pub background: f64,
    pub soft_tissue: f64,
    pub liver: f64,
    pub lesion: f64,
}

impl Default for HuMeans {
    fn default() -> Self {
        Self { background: -1000.0, soft_tissue: 50.0, liver: 100.0, lesion: 30.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    /// `[depth, height, width]`.
    pub shape: [usize; 3],
    /// Millimetres per voxel along `[z, y, x]`.
    pub spacing: [f64; 3],
    /// Body cylinder center and radii in `(y, x)` voxels.
    pub body_center: [f64; 2],
    pub body_radii: [f64; 2],
    /// Liver ellipsoid center and radii in `[z, y, x]` voxels.
    pub liver_center: [f64; 3],
    pub liver_radii: [f64; 3],
    pub lesion_count: usize,
    /// Lesion radius range in in-plane voxels; spheres are isotropic in mm.
    pub lesion_radius: [f64; 2],
    pub hu: HuMeans,
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            shape: [16, 64, 64],
            spacing: [2.5, 1.0, 1.0],
            body_center: [32.0, 32.0],
            body_radii: [27.0, 30.0],
            liver_center: [6.5, 30.0, 27.0],
            liver_radii: [6.0, 17.0, 21.0],
            lesion_count: 2,
            lesion_radius: [8.0, 11.0],
            hu: HuMeans::default(),
            noise_std: 10.0,
        }
    }
}

impl PhantomConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// This layout with the liver shifted and stretched per seed, so a
    /// dataset of phantoms does not share one organ silhouette.
    pub fn varied(&self, seed: u64) -> Self {
        let mut cfg = Self { seed, ..self.clone() };
        let mut rng = stream_rng(seed, STREAM_GEOMETRY);
        for axis in 0..3 {
            let shift = if axis == 0 { 1.0 } else { 2.5 };
            cfg.liver_center[axis] += rng.random_range(-shift..=shift);
            cfg.liver_radii[axis] *= rng.random_range(0.9..=1.1);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.shape.contains(&0) {
            return bad(format!("phantom shape {:?} has an empty axis", self.shape));
        }
        if !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad(format!("phantom spacing {:?} must be positive", self.spacing));
        }
        let radii = self.body_radii.iter().chain(&self.liver_radii);
        if !radii.clone().all(|r| r.is_finite() && *r > 0.0) {
            return bad("phantom radii must be positive".into());
        }
        let [lo, hi] = self.lesion_radius;
        if self.lesion_count > 0 && !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("lesion radius range {:?} invalid", self.lesion_radius));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {} invalid", self.noise_std));
        }
        Ok(())
    }
}

/// A lesion sphere: center in voxels, radius in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius_mm: f64,
}

/// The analytic shapes behind a phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub config: PhantomConfig,
    pub lesions: Vec<Lesion>,
}

impl Layout {
    pub fn in_body(&self, y: usize, x: usize) -> bool {
        let c = &self.config;
        let dy = (y as f64 - c.body_center[0]) / c.body_radii[0];
        let dx = (x as f64 - c.body_center[1]) / c.body_radii[1];
        dy * dy + dx * dx <= 1.0
    }

    pub fn in_liver(&self, z: usize, y: usize, x: usize) -> bool {
        in_liver(&self.config, [z as f64, y as f64, x as f64])
    }

    pub fn in_lesion(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        self.lesions.iter().any(|l| in_sphere(l, p, self.config.spacing))
    }

    pub fn label(&self, z: usize, y: usize, x: usize) -> u8 {
        if self.in_lesion(z, y, x) {
            LESION
        } else if self.in_liver(z, y, x) {
            LIVER
        } else {
            0
        }
    }
}

fn in_liver(c: &PhantomConfig, p: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c.liver_center[a]) / c.liver_radii[a]).powi(2)).sum::<f64>() <= 1.0
}

fn in_sphere(l: &Lesion, p: [f64; 3], spacing: [f64; 3]) -> bool {
    let d2: f64 = (0..3).map(|a| ((p[a] - l.center[a]) * spacing[a]).powi(2)).sum();
    d2 <= l.radius_mm * l.radius_mm
}

/// Voxel indices covered by a lesion, clipped to the volume.
fn sphere_voxels(l: &Lesion, c: &PhantomConfig) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    let range = |a: usize| {
        let r = l.radius_mm / c.spacing[a];
        let lo = (l.center[a] - r).floor().max(0.0) as usize;
        let hi = ((l.center[a] + r).ceil().max(0.0) as usize).min(c.shape[a] - 1);
        lo..=hi
    };
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                if in_sphere(l, [z as f64, y as f64, x as f64], c.spacing) {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Draws lesion spheres whose every voxel lies inside the liver.
pub fn layout(cfg: &PhantomConfig) -> Result<Layout> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, STREAM_LESIONS);
    let mut lesions = Vec::with_capacity(cfg.lesion_count);
    for index in 0..cfg.lesion_count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let radius = rng.random_range(cfg.lesion_radius[0]..=cfg.lesion_radius[1]);
            let mut center = [0.0; 3];
            for a in 0..3 {
                let r = cfg.liver_radii[a];
                center[a] = cfg.liver_center[a] + rng.random_range(-r..=r);
            }
            let lesion = Lesion { center, radius_mm: radius * cfg.spacing[2] };
            let voxels = sphere_voxels(&lesion, cfg);
            let inside = !voxels.is_empty()
                && voxels.iter().all(|v| in_liver(cfg, [v[0] as f64, v[1] as f64, v[2] as f64]))
                && fits_in_volume(&lesion, cfg);
            if inside {
                placed = Some(lesion);
                break;
            }
        }
        lesions.push(placed.ok_or(Error::LesionPlacement { index, attempts: MAX_PLACEMENT_ATTEMPTS })?);
    }
    Ok(Layout { config: cfg.clone(), lesions })
}

/// Rejects spheres that would be cut by the volume boundary.
fn fits_in_volume(l: &Lesion, c: &PhantomConfig) -> bool {
    (0..3).all(|a| {
        let r = l.radius_mm / c.spacing[a];
        l.center[a] - r >= 0.0 && l.center[a] + r <= (c.shape[a] - 1) as f64
    })
}

/// Labels and noise-free HU values of a phantom.
pub fn generate_clean(cfg: &PhantomConfig) -> Result<(Layout, Array3<f64>, LabelVolume)> {
    let layout = layout(cfg)?;
    let [d, h, w] = cfg.shape;
    let mut labels = Array3::zeros((d, h, w));
    let mut hu = Array3::zeros((d, h, w));
    for ((z, y, x), label) in labels.indexed_iter_mut() {
        *label = layout.label(z, y, x);
        hu[[z, y, x]] = match *label {
            LESION => cfg.hu.lesion,
            LIVER => cfg.hu.liver,
            _ if layout.in_body(y, x) => cfg.hu.soft_tissue,
            _ => cfg.hu.background,
        };
    }
    let labels = LabelVolume::new(labels, cfg.spacing)?;
    Ok((layout, hu, labels))
}

/// A deterministic `(Volume, LabelVolume)` pair for `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, LabelVolume)> {
    let (_, clean, labels) = generate_clean(cfg)?;
    let mut rng = stream_rng(cfg.seed, STREAM_NOISE);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let voxels = clean.mapv(|v| {
        let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (v + n).round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16
    });
    Ok((Volume::new(voxels, cfg.spacing)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = PhantomConfig::default().varied(3);
        assert_eq!(generate_phantom(&cfg).unwrap(), generate_phantom(&cfg).unwrap());
        assert_ne!(generate_phantom(&PhantomConfig::default().varied(4)).unwrap(), generate_phantom(&cfg).unwrap());
    }

    #[test]
    fn no_lesions_means_no_label_two() {
        let cfg = PhantomConfig { lesion_count: 0, ..PhantomConfig::with_seed(5) };
        let (_, labels) = generate_phantom(&cfg).unwrap();
        assert!(labels.labels().iter().all(|&l| l <= LIVER));
        assert!(labels.labels().iter().any(|&l| l == LIVER));
    }

    #[test]
    fn impossible_placement_is_reported() {
        let cfg = PhantomConfig { lesion_radius: [40.0, 40.0], ..PhantomConfig::default() };
        assert!(matches!(generate_phantom(&cfg), Err(Error::LesionPlacement { index: 0, .. })));
    }

    #[test]
    fn default_layout_leaves_empty_slices() {
        let (_, labels) = generate_phantom(&PhantomConfig::default()).unwrap();
        let d = labels.dim().0;
        let empty = (0..d).filter(|&z| labels.labels().index_axis(ndarray::Axis(0), z).iter().all(|&l| l == 0));
        assert!(empty.count() >= 2);
    }
}
