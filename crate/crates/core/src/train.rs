//! Mini-batch training of one binary segmentation network.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use liverseg_tensor::{Graph, Sgd, Tensor, TensorError};

use crate::arch::OUTPUT_STRIDE;
use crate::error::{Error, Result};
use crate::network::{batch_tensor, Network};
use crate::phantom::stream_rng;
use crate::preprocess::{nearest_indices, AugmentConfig, AugmentParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant rate before the decay phase.
    pub base_lr: f64,
    /// Starting rate of the linear decay phase.
    pub decay_lr: f64,
    pub momentum: f64,
    /// Fraction of `epochs` after which the linear decay starts.
    pub decay_start: f64,
    /// `None` trains on whole, untransformed slices.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 10,
            base_lr: 0.0016,
            decay_lr: 0.0008,
            momentum: 0.9,
            decay_start: 0.6,
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.decay_lr >= 0.0 && self.base_lr.is_finite() && self.decay_lr.is_finite()) {
            return bad(format!("learning rates {} / {} must be finite and non-negative", self.base_lr, self.decay_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.decay_start) {
            return bad(format!("decay start {} not in [0, 1]", self.decay_start));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
            if a.crop_size % OUTPUT_STRIDE != 0 {
                return bad(format!("crop size {} is not a multiple of {OUTPUT_STRIDE}", a.crop_size));
            }
        }
        Ok(())
    }

    fn decay_boundary(&self) -> usize {
        (self.decay_start * self.epochs as f64).round() as usize
    }
}

/// Constant `base_lr` until the decay boundary, then a linear ramp from
/// `decay_lr` towards zero over the remaining epochs.
pub fn learning_rate(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidConfig(format!("epoch {epoch} beyond a {}-epoch schedule", cfg.epochs)));
    }
    let b = cfg.decay_boundary();
    if epoch < b {
        Ok(cfg.base_lr)
    } else {
        Ok(cfg.decay_lr * (1.0 - (epoch - b) as f64 / (cfg.epochs - b) as f64))
    }
}

/// Input planes of one slice and its binary target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub inputs: Vec<Array2<f64>>,
    pub target: Array2<bool>,
}

impl TrainSample {
    pub fn dim(&self) -> (usize, usize) {
        self.target.dim()
    }

    fn augmented(&self, p: &AugmentParams, crop: usize) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.iter().map(|c| p.apply_continuous(c.view(), crop)).collect::<Result<_>>()?,
            target: p.apply_labels(self.target.view(), crop)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub learning_rate: f64,
}

/// Nearest-neighbour reduction of a mask to logit resolution.
pub fn downsample_target(target: ArrayView2<bool>, factor: usize) -> Array2<bool> {
    let (h, w) = target.dim();
    let (oh, ow) = (h / factor, w / factor);
    let ys = nearest_indices(h, oh);
    let xs = nearest_indices(w, ow);
    Array2::from_shape_fn((oh, ow), |(y, x)| target[[ys[y], xs[x]]])
}

/// `[N, H/8, W/8]` class indices for a batch of masks.
pub fn label_tensor(targets: &[&Array2<bool>]) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    for t in targets {
        let small = downsample_target(t.view(), OUTPUT_STRIDE);
        if *shape.get_or_insert(small.dim()) != small.dim() {
            return Err(Error::ShapeMismatch("targets of different extents in one batch".into()));
        }
        data.extend(small.iter().map(|&b| f64::from(u8::from(b))));
    }
    let (h, w) = shape.ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
    Ok(Tensor::new(&[targets.len(), h, w], data)?)
}

/// One forward/backward/update on a batch; returns the loss before the
/// update.
pub fn train_step(net: &mut Network, opt: &mut Sgd, inputs: &Tensor, labels: &Tensor, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(inputs.clone());
    let fwd = net.forward_graph(&mut g, x, true).map_err(diverged)?;
    let loss_id = g.cross_entropy(fwd.logits, labels).map_err(|e| diverged(e.into()))?;
    let loss = g.value(loss_id).item()?;
    if !loss.is_finite() {
        return Err(Error::Training(format!("loss is {loss}")));
    }
    g.backward(loss_id).map_err(|e| diverged(e.into()))?;
    let params = net.params_mut();
    params.zero_grad();
    params.accumulate(&g)?;
    opt.learning_rate = lr;
    opt.step(params)?;
    Ok(loss)
}

fn diverged(e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite(what)) => Error::Training(format!("non-finite values in {what}")),
        other => other,
    }
}

/// Builds the batch tensors for `samples[order]`, augmenting each sample
/// with draws from `rng`.
fn make_batch(
    samples: &[TrainSample],
    order: &[usize],
    augment: Option<&AugmentConfig>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let batch: Vec<TrainSample> = order
        .iter()
        .map(|&i| {
            let s = &samples[i];
            match augment {
                Some(a) => {
                    let (h, w) = s.dim();
                    let p = AugmentParams::sample(a, h, w, rng)?;
                    s.augmented(&p, a.crop_size)
                }
                None => Ok(s.clone()),
            }
        })
        .collect::<Result<_>>()?;
    let inputs: Vec<&[Array2<f64>]> = batch.iter().map(|s| s.inputs.as_slice()).collect();
    let targets: Vec<&Array2<bool>> = batch.iter().map(|s| &s.target).collect();
    Ok((batch_tensor(&inputs)?, label_tensor(&targets)?))
}

/// One pass over `samples` in shuffled mini-batches.
pub fn train_epoch(
    net: &mut Network,
    samples: &[TrainSample],
    opt: &mut Sgd,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let lr = learning_rate(epoch, cfg)?;
    let mut rng = stream_rng(cfg.seed, 1 + epoch as u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, y) = make_batch(samples, chunk, cfg.augment.as_ref(), &mut rng)?;
        total += train_step(net, opt, &x, &y, lr)?;
        batches += 1;
    }
    Ok(EpochStats { epoch, mean_loss: total / batches as f64, batches, learning_rate: lr })
}

/// Runs every epoch of the schedule.
pub fn train(net: &mut Network, samples: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    let mut opt = Sgd::new(cfg.base_lr, cfg.momentum)?;
    (0..cfg.epochs).map(|e| train_epoch(net, samples, &mut opt, e, cfg)).collect()
}

/// Mean cross-entropy of the eval-mode network over `samples`.
pub fn evaluate_loss(net: &Network, samples: &[TrainSample]) -> Result<f64> {
    let inputs: Vec<&[Array2<f64>]> = samples.iter().map(|s| s.inputs.as_slice()).collect();
    let targets: Vec<&Array2<bool>> = samples.iter().map(|s| &s.target).collect();
    let logits = net.forward(&batch_tensor(&inputs)?)?;
    Ok(liverseg_tensor::cross_entropy_loss(&logits, &label_tensor(&targets)?)?)
}
