//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates probed per input; inputs at most this large are probed
    /// exhaustively.
    pub samples_per_input: usize,
    pub seed: u64,
    /// Drop probes whose perturbation flips any ReLU unit, where the central
    /// difference straddles a kink and does not estimate the derivative.
    pub skip_kink_crossings: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, samples_per_input: 24, seed: 0, skip_kink_crossings: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Probes dropped because they crossed a ReLU kink.
    pub skipped: usize,
    pub worst: Option<Probe>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(inputs: &[Tensor], build: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::inference();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let v = g.value(out).item()?;
    if v.is_finite() {
        Ok((v, g.relu_pattern()))
    } else {
        Err(TensorError::NonFinite("grad_check"))
    }
}

/// Compares the gradients produced by [`Graph::backward`] for the scalar
/// built by `build` against `(f(x + eps) - f(x - eps)) / (2 eps)` at randomly
/// chosen coordinates of every input.
pub fn grad_check<F>(inputs: &[Tensor], mut build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let base_pattern = g.relu_pattern();
    g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, probes: 0, skipped: 0, worst: None };
    let mut probe_inputs = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.samples_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.samples_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for index in coords {
            let orig = input.data()[index];
            probe_inputs[i].data_mut()[index] = orig + cfg.eps;
            let (plus, plus_pattern) = evaluate(&probe_inputs, &mut build)?;
            probe_inputs[i].data_mut()[index] = orig - cfg.eps;
            let (minus, minus_pattern) = evaluate(&probe_inputs, &mut build)?;
            probe_inputs[i].data_mut()[index] = orig;
            if cfg.skip_kink_crossings && (plus_pattern != base_pattern || minus_pattern != base_pattern) {
                report.skipped += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[i].data()[index];
            let rel_error = relative_error(a, numeric);
            report.probes += 1;
            if report.worst.is_none() || rel_error > report.max_rel_error {
                report.max_rel_error = rel_error;
                report.worst = Some(Probe { input: i, index, analytic: a, numeric, rel_error });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            &[x],
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                g.sum(sq)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.probes, 3);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at exactly zero has a one-sided numeric derivative of 1/2.
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(
            &[x],
            |g, ids| {
                let y = g.relu(ids[0])?;
                g.sum(y)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn kink_crossings_can_be_skipped() {
        let x = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let cfg = GradCheckConfig { skip_kink_crossings: true, ..GradCheckConfig::default() };
        let r = grad_check(
            &[x],
            |g, ids| {
                let y = g.relu(ids[0])?;
                g.sum(y)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!((r.probes, r.skipped), (1, 1));
        assert!(r.max_rel_error < 1e-8);
    }
}
