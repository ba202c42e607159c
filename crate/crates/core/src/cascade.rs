//! Two-stage cascade: stage-1 liver and lesion maps are stacked with the
//! image and refined by stage-2 networks.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use liverseg_tensor::{parallel, Tensor};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::network::{batch_tensor, Class, Network, ProbabilityMap};
use crate::phantom::derive_seed;
use crate::preprocess::SliceSample;
use crate::train::{train, EpochStats, TrainConfig, TrainSample};

/// Slices per eval-mode forward batch.
pub const PREDICT_BATCH: usize = 16;

/// Channels of a stage-2 input: image, lesion map, liver map.
pub const CASCADE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub stage1_liver: Network,
    pub stage1_lesion: Network,
    pub stage2_liver: Network,
    pub stage2_lesion: Network,
}

/// Liver and lesion maps for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePrediction {
    pub liver: ProbabilityMap,
    pub lesion: ProbabilityMap,
}

impl CascadeModel {
    /// Four freshly initialized networks sharing `spec`; stage 2 takes three
    /// input channels.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let one = spec.with_input_channels(1);
        let two = spec.with_input_channels(CASCADE_CHANNELS);
        Ok(Self {
            stage1_liver: Network::build(&one, derive_seed(seed, 11))?,
            stage1_lesion: Network::build(&one, derive_seed(seed, 12))?,
            stage2_liver: Network::build(&two, derive_seed(seed, 21))?,
            stage2_lesion: Network::build(&two, derive_seed(seed, 22))?,
        })
    }

    pub fn network(&self, stage: Stage, class: Class) -> &Network {
        match (stage, class) {
            (Stage::One, Class::Liver) => &self.stage1_liver,
            (Stage::One, Class::Lesion) => &self.stage1_lesion,
            (Stage::Two, Class::Liver) => &self.stage2_liver,
            (Stage::Two, Class::Lesion) => &self.stage2_lesion,
        }
    }

    pub fn network_mut(&mut self, stage: Stage, class: Class) -> &mut Network {
        match (stage, class) {
            (Stage::One, Class::Liver) => &mut self.stage1_liver,
            (Stage::One, Class::Lesion) => &mut self.stage1_lesion,
            (Stage::Two, Class::Liver) => &mut self.stage2_liver,
            (Stage::Two, Class::Lesion) => &mut self.stage2_lesion,
        }
    }

    /// `(stage, class)` of each network in a fixed order.
    pub fn slots() -> [(Stage, Class); 4] {
        [(Stage::One, Class::Liver), (Stage::One, Class::Lesion), (Stage::Two, Class::Liver), (Stage::Two, Class::Lesion)]
    }

    /// Stage-1 maps only.
    pub fn predict_stage1(&self, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>> {
        let inputs: Vec<Vec<Array2<f64>>> = images.iter().map(|i| vec![i.clone()]).collect();
        predict_pair(&self.stage1_liver, &self.stage1_lesion, &inputs)
    }

    /// Stage 1, stacking, then stage 2.
    pub fn predict_cascade(&self, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>> {
        let first = self.predict_stage1(images)?;
        let inputs = images
            .iter()
            .zip(&first)
            .map(|(i, p)| stack_cascade_input(i, &p.lesion, &p.liver))
            .collect::<Result<Vec<_>>>()?;
        predict_pair(&self.stage2_liver, &self.stage2_lesion, &inputs)
    }

    pub fn predict(&self, stage: Stage, images: &[Array2<f64>]) -> Result<Vec<SlicePrediction>> {
        match stage {
            Stage::One => self.predict_stage1(images),
            Stage::Two => self.predict_cascade(images),
        }
    }
}

/// Per-slice predictions of a liver and a lesion network on shared inputs.
fn predict_pair(liver: &Network, lesion: &Network, inputs: &[Vec<Array2<f64>>]) -> Result<Vec<SlicePrediction>> {
    let (l, t) = parallel::join(|| predict_all(liver, inputs), || predict_all(lesion, inputs));
    let (l, t) = (l?, t?);
    l.into_iter()
        .zip(t)
        .map(|(l, t)| Ok(SlicePrediction { liver: ProbabilityMap::new(l, Class::Liver)?, lesion: ProbabilityMap::new(t, Class::Lesion)? }))
        .collect()
}

fn predict_all(net: &Network, inputs: &[Vec<Array2<f64>>]) -> Result<Vec<Array2<f64>>> {
    let chunks: Vec<&[Vec<Array2<f64>>]> = inputs.chunks(PREDICT_BATCH).collect();
    let per_chunk = parallel::map_slice(&chunks, |_, chunk| net.predict_probs(&batch_tensor(chunk)?));
    let mut out = Vec::with_capacity(inputs.len());
    for maps in per_chunk {
        out.extend(maps?.into_iter().map(|m| m.mapv(|v| v.clamp(0.0, 1.0))));
    }
    Ok(out)
}

/// Input planes for stage 2 in the fixed order `(image, lesion, liver)`.
pub fn stack_cascade_input(image: &Array2<f64>, lesion: &ProbabilityMap, liver: &ProbabilityMap) -> Result<Vec<Array2<f64>>> {
    if lesion.dim() != image.dim() || liver.dim() != image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, lesion map {:?}, liver map {:?}",
            image.dim(),
            lesion.dim(),
            liver.dim()
        )));
    }
    Ok(vec![image.clone(), lesion.values.clone(), liver.values.clone()])
}

/// Tensor form of [`stack_cascade_input`]: `[1,1,R,R]` image to `[1,3,R,R]`.
pub fn stack_cascade_tensor(image: &Tensor, lesion: &ProbabilityMap, liver: &ProbabilityMap) -> Result<Tensor> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch(format!("expected a [1, 1, R, R] image, got {:?}", image.shape())));
    }
    let plane = Array2::from_shape_vec((h, w), image.data().to_vec()).expect("plane extent");
    batch_tensor(&[stack_cascade_input(&plane, lesion, liver)?])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeHistory {
    pub stage1_liver: Vec<EpochStats>,
    pub stage1_lesion: Vec<EpochStats>,
    pub stage2_liver: Vec<EpochStats>,
    pub stage2_lesion: Vec<EpochStats>,
}

fn samples_for(inputs: &[Vec<Array2<f64>>], slices: &[SliceSample], class: Class) -> Vec<TrainSample> {
    inputs
        .iter()
        .zip(slices)
        .map(|(i, s)| TrainSample {
            inputs: i.clone(),
            target: match class {
                Class::Liver => s.liver.clone(),
                Class::Lesion => s.lesion.clone(),
            },
        })
        .collect()
}

fn seeded(cfg: &TrainConfig, tag: u64) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seed, tag), ..cfg.clone() }
}

/// Phase A trains both stage-1 networks; phase B freezes them, computes
/// their maps for every training slice and trains stage 2 on the stacked
/// inputs against the same targets.
pub fn train_cascade(model: &mut CascadeModel, slices: &[SliceSample], cfg: &CascadeConfig) -> Result<CascadeHistory> {
    if slices.is_empty() {
        return Err(Error::InvalidConfig("no training slices".into()));
    }
    let images: Vec<Array2<f64>> = slices.iter().map(|s| s.image.clone()).collect();
    let single: Vec<Vec<Array2<f64>>> = images.iter().map(|i| vec![i.clone()]).collect();
    let (liver_a, lesion_a) = (samples_for(&single, slices, Class::Liver), samples_for(&single, slices, Class::Lesion));
    let (cfg_liver, cfg_lesion) = (seeded(&cfg.stage1, 11), seeded(&cfg.stage1, 12));
    let CascadeModel { stage1_liver, stage1_lesion, stage2_liver, stage2_lesion } = model;
    let (h1, h2) = parallel::join(
        || train(stage1_liver, &liver_a, &cfg_liver),
        || train(stage1_lesion, &lesion_a, &cfg_lesion),
    );
    let mut history = CascadeHistory { stage1_liver: h1?, stage1_lesion: h2?, ..CascadeHistory::default() };

    let first = predict_pair(stage1_liver, stage1_lesion, &single)?;
    let stacked = images
        .iter()
        .zip(&first)
        .map(|(i, p)| stack_cascade_input(i, &p.lesion, &p.liver))
        .collect::<Result<Vec<_>>>()?;
    let (liver_b, lesion_b) = (samples_for(&stacked, slices, Class::Liver), samples_for(&stacked, slices, Class::Lesion));
    let (cfg_liver, cfg_lesion) = (seeded(&cfg.stage2, 21), seeded(&cfg.stage2, 22));
    let (h3, h4) = parallel::join(
        || train(stage2_liver, &liver_b, &cfg_liver),
        || train(stage2_lesion, &lesion_b, &cfg_lesion),
    );
    history.stage2_liver = h3?;
    history.stage2_lesion = h4?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: f64, class: Class) -> ProbabilityMap {
        ProbabilityMap::new(Array2::from_elem((8, 8), v), class).unwrap()
    }

    #[test]
    fn channel_order_is_image_lesion_liver() {
        let image = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64 / 64.0);
        let t = stack_cascade_tensor(
            &Tensor::new(&[1, 1, 8, 8], image.iter().copied().collect()).unwrap(),
            &map(0.25, Class::Lesion),
            &map(0.75, Class::Liver),
        )
        .unwrap();
        assert_eq!(t.shape(), &[1, 3, 8, 8]);
        assert_eq!(t.plane(0, 0), image.as_slice().unwrap());
        assert!(t.plane(0, 1).iter().all(|&v| v == 0.25));
        assert!(t.plane(0, 2).iter().all(|&v| v == 0.75));
    }

    #[test]
    fn extent_mismatch_rejected() {
        let image = Array2::zeros((16, 16));
        assert!(stack_cascade_input(&image, &map(0.0, Class::Lesion), &map(0.0, Class::Liver)).is_err());
    }

    #[test]
    fn stage_two_takes_three_channels() {
        let m = CascadeModel::build(&ArchSpec::desk(), 0).unwrap();
        assert_eq!(m.stage1_liver.input_channels(), 1);
        assert_eq!(m.stage2_lesion.input_channels(), 3);
        assert_ne!(m.stage1_liver.params(), m.stage1_lesion.params());
    }
}
