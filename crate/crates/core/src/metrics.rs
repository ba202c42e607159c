//! Dice and Jaccard overlap and per-volume evaluation reports.

use std::fmt::Write as _;

use ndarray::{ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// `(|A ∩ B|, |A|, |B|)`.
fn counts<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<(usize, usize, usize)>
where
    S1: Data<Elem = bool>,
    S2: Data<Elem = bool>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    Zip::from(a).and(b).for_each(|&x, &y| {
        inter += usize::from(x && y);
        na += usize::from(x);
        nb += usize::from(y);
    });
    Ok((inter, na, nb))
}

/// `2|A ∩ B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = bool>,
    S2: Data<Elem = bool>,
    D: Dimension,
{
    let (i, na, nb) = counts(a, b)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 })
}

/// `|A ∩ B| / |A ∪ B|`, 1 when both are empty.
pub fn jaccard<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = bool>,
    S2: Data<Elem = bool>,
    D: Dimension,
{
    let (i, na, nb) = counts(a, b)?;
    let union = na + nb - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub liver_dice: f64,
    pub liver_jaccard: f64,
    pub lesion_dice: f64,
    pub lesion_jaccard: f64,
}

/// Liver scores on label ∈ {1, 2}, lesion scores on label 2.
pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<VolumeMetrics> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let (pl, tl) = (pred.liver_mask(), truth.liver_mask());
    let (pt, tt) = (pred.lesion_mask(), truth.lesion_mask());
    Ok(VolumeMetrics {
        liver_dice: dice(&pl, &tl)?,
        liver_jaccard: jaccard(&pl, &tl)?,
        lesion_dice: dice(&pt, &tt)?,
        lesion_jaccard: jaccard(&pt, &tt)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    #[serde(flatten)]
    pub metrics: VolumeMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub volumes: usize,
    pub mean: VolumeMetrics,
    pub cases: Vec<CaseMetrics>,
}

impl EvalReport {
    /// Unweighted mean over cases.
    pub fn new(method: impl Into<String>, cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidConfig("no volumes to report".into()));
        }
        let n = cases.len() as f64;
        let sum = |f: fn(&VolumeMetrics) -> f64| cases.iter().map(|c| f(&c.metrics)).sum::<f64>() / n;
        let mean = VolumeMetrics {
            liver_dice: sum(|m| m.liver_dice),
            liver_jaccard: sum(|m| m.liver_jaccard),
            lesion_dice: sum(|m| m.lesion_dice),
            lesion_jaccard: sum(|m| m.lesion_jaccard),
        };
        Ok(Self { method: method.into(), volumes: cases.len(), mean, cases })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Percentages in the column order liver Dice, liver Jaccard, lesion
    /// Dice, lesion Jaccard.
    pub fn table(&self) -> String {
        let header = ["Liver Dice", "Liver Jaccard", "Lesion Dice", "Lesion Jaccard"];
        let width = self.cases.iter().map(|c| c.case.len()).chain([self.method.len(), 6]).max().unwrap_or(6);
        let mut out = format!("{:<width$}", "Case");
        for h in header {
            write!(out, "  {h:>14}").expect("write");
        }
        out.push('\n');
        let mut row = |name: &str, m: &VolumeMetrics| {
            write!(out, "{name:<width$}").expect("write");
            for v in [m.liver_dice, m.liver_jaccard, m.lesion_dice, m.lesion_jaccard] {
                write!(out, "  {:>13.2}%", 100.0 * v).expect("write");
            }
            out.push('\n');
        };
        for c in &self.cases {
            row(&c.case, &c.metrics);
        }
        row(&self.method, &self.mean);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn hand_counted_overlap() {
        let a = Array2::from_shape_fn((4, 6), |(y, x)| y < 2 && x < 2);
        let b = Array2::from_shape_fn((4, 6), |(y, x)| y < 2 && (1..3).contains(&x));
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert!((jaccard(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases() {
        let empty = Array2::from_elem((3, 3), false);
        let full = Array2::from_elem((3, 3), true);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&full, &full).unwrap(), 1.0);
        assert_eq!(dice(&full, &empty).unwrap(), 0.0);
        assert!(dice(&full, &Array2::from_elem((3, 4), true)).is_err());
    }

    #[test]
    fn report_means_and_table() {
        let m = |d: f64| VolumeMetrics { liver_dice: d, liver_jaccard: d / (2.0 - d), lesion_dice: d, lesion_jaccard: d / (2.0 - d) };
        let r = EvalReport::new(
            "cascade",
            vec![CaseMetrics { case: "a".into(), metrics: m(1.0) }, CaseMetrics { case: "b".into(), metrics: m(0.5) }],
        )
        .unwrap();
        assert_eq!(r.mean.liver_dice, 0.75);
        let t = r.table();
        assert!(t.contains("Liver Dice") && t.contains("75.00%"));
    }
}
