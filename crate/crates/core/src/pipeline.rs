//! End-to-end steps: phantom dataset, slice selection, cascade training,
//! volume prediction and evaluation.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use liverseg_tensor::parallel;

use crate::cascade::{train_cascade, CascadeHistory, CascadeModel, SlicePrediction, Stage};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, CaseMetrics, EvalReport};
use crate::multiscale::{multiscale_predict, StagePredictor};
use crate::phantom::{derive_seed, generate_phantom, PhantomConfig};
use crate::postprocess::{finalize_labels, Thresholds};
use crate::preprocess::{extract_slices, select_training_slices, window_and_normalize, SliceSample};
use crate::volume::{read_intensity, read_labels, write_volume, LabelVolume, Volume};

const TAG_TRAIN_CASE: u64 = 1 << 32;
const TAG_VAL_CASE: u64 = 2 << 32;
const TAG_SELECTION: u64 = 3;
const TAG_MODEL: u64 = 4;

pub const IMAGE_SUFFIX: &str = "_image.ctvol";
pub const LABEL_SUFFIX: &str = "_labels.ctvol";
pub const MASK_SUFFIX: &str = "_mask.ctvol";

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub labels: LabelVolume,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub fn case_config(cfg: &RunConfig, validation: bool, index: usize) -> PhantomConfig {
    let tag = if validation { TAG_VAL_CASE } else { TAG_TRAIN_CASE } + index as u64;
    cfg.dataset.phantom.varied(derive_seed(cfg.seed, tag))
}

fn make_cases(cfg: &RunConfig, validation: bool, count: usize) -> Result<Vec<Case>> {
    let prefix = if validation { "val" } else { "train" };
    parallel::map_range(count, |i| {
        let (volume, labels) = generate_phantom(&case_config(cfg, validation, i))?;
        Ok(Case { id: format!("{prefix}{i:03}"), volume, labels })
    })
    .into_iter()
    .collect()
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset {
        train: make_cases(cfg, false, cfg.dataset.train_cases)?,
        val: make_cases(cfg, true, cfg.dataset.val_cases)?,
    })
}

pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for case in data.train.iter().chain(&data.val) {
        write_volume(dir.join(format!("{}{IMAGE_SUFFIX}", case.id)), &case.volume.clone().into())?;
        write_volume(dir.join(format!("{}{LABEL_SUFFIX}", case.id)), &case.labels.clone().into())?;
    }
    let manifest = DatasetManifest {
        train: data.train.iter().map(|c| c.id.clone()).collect(),
        val: data.val.iter().map(|c| c.id.clone()).collect(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    let read = |ids: &[String]| -> Result<Vec<Case>> {
        ids.iter()
            .map(|id| {
                let volume = read_intensity(dir.join(format!("{id}{IMAGE_SUFFIX}")))?;
                let labels = read_labels(dir.join(format!("{id}{LABEL_SUFFIX}")))?;
                if volume.dim() != labels.dim() {
                    return Err(Error::ShapeMismatch(format!("case {id}: image {:?} vs labels {:?}", volume.dim(), labels.dim())));
                }
                Ok(Case { id: id.clone(), volume, labels })
            })
            .collect()
    };
    Ok(Dataset { train: read(&manifest.train)?, val: read(&manifest.val)? })
}

/// Every axial slice of `cases`, in case then depth order.
pub fn all_slices(cfg: &RunConfig, cases: &[Case]) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        out.extend(extract_slices(i, &c.volume, &c.labels, &cfg.window)?);
    }
    Ok(out)
}

/// Seed of the balanced slice selection.
pub fn selection_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, TAG_SELECTION)
}

/// The balanced training subset of all training slices.
pub fn training_slices(cfg: &RunConfig, cases: &[Case]) -> Result<Vec<SliceSample>> {
    let pool = all_slices(cfg, cases)?;
    let chosen = select_training_slices(&pool, cfg.dataset.training_slices, selection_seed(cfg))?;
    Ok(chosen.into_iter().map(|i| pool[i].clone()).collect())
}

pub fn build_model(cfg: &RunConfig) -> Result<CascadeModel> {
    CascadeModel::build(&cfg.arch()?, derive_seed(cfg.seed, TAG_MODEL))
}

pub fn train_model(cfg: &RunConfig, slices: &[SliceSample]) -> Result<(CascadeModel, CascadeHistory)> {
    let mut model = build_model(cfg)?;
    let history = train_cascade(&mut model, slices, &cfg.training)?;
    Ok((model, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    /// Stage-1 networks only, single scale.
    Stage1,
    /// Full cascade, single scale.
    Cascade,
    /// Full cascade averaged over the configured scales.
    Multiscale,
}

impl PredictMode {
    pub const ALL: [PredictMode; 3] = [PredictMode::Stage1, PredictMode::Cascade, PredictMode::Multiscale];

    pub fn name(self) -> &'static str {
        match self {
            PredictMode::Stage1 => "stage1",
            PredictMode::Cascade => "cascade",
            PredictMode::Multiscale => "multiscale",
        }
    }
}

pub fn predict_slices(
    model: &CascadeModel,
    images: &[Array2<f64>],
    mode: PredictMode,
    cfg: &RunConfig,
) -> Result<Vec<SlicePrediction>> {
    match mode {
        PredictMode::Stage1 => model.predict_stage1(images),
        PredictMode::Cascade => model.predict_cascade(images),
        PredictMode::Multiscale => {
            multiscale_predict(&StagePredictor { model, stage: Stage::Two }, images, &cfg.scales)
        }
    }
}

/// Probability maps for every axial slice of `volume`.
pub fn predict_maps(model: &CascadeModel, volume: &Volume, mode: PredictMode, cfg: &RunConfig) -> Result<Vec<SlicePrediction>> {
    let normalized = window_and_normalize(volume, &cfg.window);
    let images: Vec<Array2<f64>> = normalized.axis_iter(Axis(0)).map(|s| s.to_owned()).collect();
    predict_slices(model, &images, mode, cfg)
}

/// Thresholds and hole-fills per-slice maps into a label volume.
pub fn labels_from_maps(maps: &[SlicePrediction], thresholds: &Thresholds, spacing: [f64; 3]) -> Result<LabelVolume> {
    let first = maps.first().ok_or_else(|| Error::ShapeMismatch("no slices to label".into()))?;
    let (h, w) = first.liver.dim();
    let labels = parallel::map_slice(maps, |_, p| finalize_labels(&p.liver, &p.lesion, thresholds));
    let mut out = Array3::zeros((maps.len(), h, w));
    for (z, l) in labels.into_iter().enumerate() {
        let l = l?;
        if l.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!("slice {z} is {:?}, expected {:?}", l.dim(), (h, w))));
        }
        out.index_axis_mut(Axis(0), z).assign(&l);
    }
    LabelVolume::new(out, spacing)
}

/// Label volume predicted slice by slice, with hole filling.
pub fn predict_volume(model: &CascadeModel, volume: &Volume, mode: PredictMode, cfg: &RunConfig) -> Result<LabelVolume> {
    labels_from_maps(&predict_maps(model, volume, mode, cfg)?, &cfg.thresholds, volume.spacing())
}

/// Picks the liver and lesion thresholds from `cfg.calibration.grid` that
/// maximize mean liver Dice plus mean lesion Dice on the leading
/// `cfg.calibration.cases` of `cases`. Ties keep the earlier grid entry.
///
/// Logits are upsampled before the softmax, so a net that is more confident
/// on background than on foreground pulls the 0.5 contour inward; a lower
/// threshold undoes that shrinkage.
pub fn calibrate_thresholds(model: &CascadeModel, cases: &[Case], mode: PredictMode, cfg: &RunConfig) -> Result<Thresholds> {
    let n = cfg.calibration.cases.min(cases.len());
    if n == 0 || cfg.calibration.grid.is_empty() {
        return Ok(cfg.thresholds);
    }
    let maps = cases[..n]
        .iter()
        .map(|c| predict_maps(model, &c.volume, mode, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<(f64, Thresholds)> = None;
    for &liver in &cfg.calibration.grid {
        for &lesion in &cfg.calibration.grid {
            let t = Thresholds { liver, lesion };
            let mut score = 0.0;
            for (c, m) in cases.iter().zip(&maps) {
                let v = evaluate(&labels_from_maps(m, &t, c.volume.spacing())?, &c.labels)?;
                score += v.liver_dice + v.lesion_dice;
            }
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, t));
            }
        }
    }
    Ok(best.expect("non-empty grid").1)
}

/// Predicts every case and scores it against its ground truth.
pub fn evaluate_model(model: &CascadeModel, cases: &[Case], mode: PredictMode, cfg: &RunConfig) -> Result<EvalReport> {
    let metrics = cases
        .iter()
        .map(|c| {
            let pred = predict_volume(model, &c.volume, mode, cfg)?;
            Ok(CaseMetrics { case: c.id.clone(), metrics: evaluate(&pred, &c.labels)? })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(mode.name(), metrics)
}

/// Thresholds chosen separately for each prediction mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeThresholds {
    pub stage1: Thresholds,
    pub cascade: Thresholds,
    pub multiscale: Thresholds,
}

impl ModeThresholds {
    pub fn uniform(t: Thresholds) -> Self {
        Self { stage1: t, cascade: t, multiscale: t }
    }

    pub fn get(&self, mode: PredictMode) -> Thresholds {
        match mode {
            PredictMode::Stage1 => self.stage1,
            PredictMode::Cascade => self.cascade,
            PredictMode::Multiscale => self.multiscale,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn calibrate_modes(model: &CascadeModel, cases: &[Case], cfg: &RunConfig) -> Result<ModeThresholds> {
    Ok(ModeThresholds {
        stage1: calibrate_thresholds(model, cases, PredictMode::Stage1, cfg)?,
        cascade: calibrate_thresholds(model, cases, PredictMode::Cascade, cfg)?,
        multiscale: calibrate_thresholds(model, cases, PredictMode::Multiscale, cfg)?,
    })
}

pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const HISTORY_FILE: &str = "history.json";

/// Everything a complete run produced, also written under its directory.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub model: CascadeModel,
    pub history: CascadeHistory,
    pub thresholds: ModeThresholds,
    /// One validation report per mode, in `PredictMode::ALL` order.
    pub reports: Vec<EvalReport>,
}

impl PipelineRun {
    pub fn report(&self, mode: PredictMode) -> &EvalReport {
        &self.reports[PredictMode::ALL.iter().position(|&m| m == mode).expect("every mode")]
    }
}

/// Trains the model and writes a mask volume per validation case
/// and mode, then scores each mode on the validation cases.
///
/// Layout under `dir`: `model/` (checkpoints, thresholds, history),
/// `masks/<mode>/` and `reports/<mode>.json`.
pub fn run_pipeline(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<PipelineRun> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let data = generate_dataset(cfg)?;
    let slices = training_slices(cfg, &data.train)?;
    let (model, history) = train_model(cfg, &slices)?;
    let thresholds = calibrate_modes(&model, &data.train, cfg)?;

    let model_dir = dir.join("model");
    crate::checkpoint::save_model(&model, &model_dir)?;
    thresholds.save(model_dir.join(THRESHOLDS_FILE))?;
    fs::write(model_dir.join(HISTORY_FILE), serde_json::to_string_pretty(&history)?)?;

    fs::create_dir_all(dir.join("reports"))?;
    let mut reports = Vec::new();
    for mode in PredictMode::ALL {
        let mask_dir = dir.join("masks").join(mode.name());
        fs::create_dir_all(&mask_dir)?;
        let mode_cfg = RunConfig { thresholds: thresholds.get(mode), ..cfg.clone() };
        let mut metrics = Vec::new();
        for c in &data.val {
            let pred = predict_volume(&model, &c.volume, mode, &mode_cfg)?;
            write_volume(mask_dir.join(format!("{}{MASK_SUFFIX}", c.id)), &pred.clone().into())?;
            metrics.push(CaseMetrics { case: c.id.clone(), metrics: evaluate(&pred, &c.labels)? });
        }
        let report = EvalReport::new(mode.name(), metrics)?;
        fs::write(dir.join("reports").join(format!("{}.json", mode.name())), report.to_json())?;
        reports.push(report);
    }
    Ok(PipelineRun { model, history, thresholds, reports })
}
