//! Run configuration shared by the library pipeline and the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::multiscale::ScaleSet;
use crate::phantom::PhantomConfig;
use crate::postprocess::Thresholds;
use crate::preprocess::{AugmentConfig, WindowSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "run/data".into(), checkpoint_dir: "run/model".into(), output_dir: "run/output".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_cases: usize,
    pub val_cases: usize,
    /// Balanced training slices: half with liver and lesion, half with
    /// neither.
    pub training_slices: usize,
    /// Geometry shared by every phantom before per-case variation.
    pub phantom: PhantomConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train_cases: 20, val_cases: 5, training_slices: 150, phantom: PhantomConfig::default() }
    }
}

/// Threshold search on training phantoms after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Leading training cases scored for each candidate; 0 disables the search.
    pub cases: usize,
    /// Candidate values, tried for both classes.
    pub grid: Vec<f64>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { cases: 5, grid: vec![0.5, 0.4, 0.3, 0.2, 0.1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Architecture JSON file; the bundled 1/16-width schedule when absent.
    pub arch_file: Option<PathBuf>,
    /// Overrides the architecture's width multiplier.
    pub width_multiplier: Option<f64>,
    pub window: WindowSpec,
    pub dataset: DatasetConfig,
    pub training: CascadeConfig,
    pub scales: ScaleSet,
    pub thresholds: Thresholds,
    pub calibration: CalibrationConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    /// The desk-scale run: 20 + 5 phantoms of 16x64x64, 1/16 width.
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 15,
            batch_size: 10,
            base_lr: 0.05,
            decay_lr: 0.025,
            momentum: 0.9,
            decay_start: 0.6,
            augment: Some(AugmentConfig::default()),
            seed: 0,
        };
        Self {
            paths: Paths::default(),
            arch_file: None,
            width_multiplier: None,
            window: WindowSpec::default(),
            dataset: DatasetConfig::default(),
            training: CascadeConfig { stage1: train.clone(), stage2: train },
            scales: ScaleSet::desk(),
            thresholds: Thresholds::default(),
            calibration: CalibrationConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets the master seed and the training seeds derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.training.stage1.seed = seed;
        self.training.stage2.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.training.stage1.epochs = epochs;
        self.training.stage2.epochs = epochs;
        self
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        let spec = match &self.arch_file {
            Some(p) => ArchSpec::load(p)?,
            None => ArchSpec::desk(),
        };
        let spec = match self.width_multiplier {
            Some(w) => spec.with_width_multiplier(w),
            None => spec,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.arch_file {
            if !p.is_file() {
                return Err(Error::InvalidConfig(format!("architecture file {} does not exist", p.display())));
            }
        }
        self.arch()?;
        self.window.validate()?;
        self.dataset.phantom.validate()?;
        if self.dataset.train_cases == 0 {
            return Err(Error::InvalidConfig("at least one training case is required".into()));
        }
        self.training.stage1.validate()?;
        self.training.stage2.validate()?;
        self.scales.validate()?;
        let [_, h, w] = self.dataset.phantom.shape;
        if self.scales.base != h || self.scales.base != w {
            return Err(Error::InvalidConfig(format!("scale base {} differs from slice extent {h}x{w}", self.scales.base)));
        }
        for t in [self.thresholds.liver, self.thresholds.lesion] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidConfig(format!("threshold {t} not in [0, 1]")));
            }
        }
        if self.calibration.cases > 0 && self.calibration.grid.is_empty() {
            return Err(Error::InvalidConfig("calibration grid is empty".into()));
        }
        if let Some(t) = self.calibration.grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidConfig(format!("calibration threshold {t} not in [0, 1]")));
        }
        Ok(())
    }
}
