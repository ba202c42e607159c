//! Slice-wise hole filling and label assembly from probability maps.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ProbabilityMap;
use crate::volume::{LESION, LIVER};

/// A 2-D binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask2D(pub Array2<bool>);

impl BinaryMask2D {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Background pixels not 4-connected to the border become foreground.
pub fn fill_holes_slice(m: &BinaryMask2D) -> BinaryMask2D {
    let mask = &m.0;
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let seed = |y: usize, x: usize, outside: &mut Array2<bool>, queue: &mut VecDeque<(usize, usize)>| {
        if !mask[[y, x]] && !outside[[y, x]] {
            outside[[y, x]] = true;
            queue.push_back((y, x));
        }
    };
    for x in 0..w {
        seed(0, x, &mut outside, &mut queue);
        seed(h - 1, x, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(y, 0, &mut outside, &mut queue);
        seed(y, w - 1, &mut outside, &mut queue);
    }
    while let Some((y, x)) = queue.pop_front() {
        if y > 0 {
            seed(y - 1, x, &mut outside, &mut queue);
        }
        if y + 1 < h {
            seed(y + 1, x, &mut outside, &mut queue);
        }
        if x > 0 {
            seed(y, x - 1, &mut outside, &mut queue);
        }
        if x + 1 < w {
            seed(y, x + 1, &mut outside, &mut queue);
        }
    }
    BinaryMask2D(outside.mapv(|o| !o))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub liver: f64,
    pub lesion: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { liver: 0.5, lesion: 0.5 }
    }
}

/// Thresholds both maps, fills holes in the organ mask (liver or lesion) and
/// in the lesion mask, then assigns 2 to lesion pixels and 1 to the rest of
/// the organ mask. Lesions are not clipped to the liver.
pub fn finalize_labels(liver: &ProbabilityMap, lesion: &ProbabilityMap, t: &Thresholds) -> Result<Array2<u8>> {
    if liver.dim() != lesion.dim() {
        return Err(Error::ShapeMismatch(format!("liver map {:?} vs lesion map {:?}", liver.dim(), lesion.dim())));
    }
    let lesion_raw = lesion.values.mapv(|p| p >= t.lesion);
    let organ_raw = ndarray::Zip::from(&liver.values).and(&lesion_raw).map_collect(|&p, &l| l || p >= t.liver);
    let lesion_mask = fill_holes_slice(&BinaryMask2D(lesion_raw)).0;
    let organ_mask = fill_holes_slice(&BinaryMask2D(organ_raw)).0;
    Ok(ndarray::Zip::from(&organ_mask).and(&lesion_mask).map_collect(|&o, &l| {
        if l {
            LESION
        } else if o {
            LIVER
        } else {
            0
        }
    }))
}
