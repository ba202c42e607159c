//! Declarative layer schedules and their shape arithmetic.
//!
//! A schedule is a list of rows. Each row is one convolution (plain or
//! classifier) or a residual block repeated `repeat` times. The full-width
//! schedule and a 1/16-width variant are shipped as JSON in `specs/`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use liverseg_tensor::ConvParams;

use crate::error::{Error, Result};

pub const FULL_SPEC_JSON: &str = include_str!("../specs/full.json");
pub const DESK_SPEC_JSON: &str = include_str!("../specs/desk.json");

/// Product of all strides in a valid schedule.
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub convs: Vec<ConvSpec>,
    pub residual: bool,
    pub repeat: usize,
    /// The final bare convolution producing class scores.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub classifier: bool,
}

impl StageRow {
    fn stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    pub width_multiplier: f64,
    pub rows: Vec<StageRow>,
}

impl ArchSpec {
    pub fn full() -> Self {
        Self::from_json(FULL_SPEC_JSON).expect("bundled full spec is valid")
    }

    pub fn desk() -> Self {
        Self::from_json(DESK_SPEC_JSON).expect("bundled desk spec is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn with_input_channels(&self, channels: usize) -> Self {
        Self { input_channels: channels, ..self.clone() }
    }

    pub fn with_width_multiplier(&self, width_multiplier: f64) -> Self {
        Self { width_multiplier, ..self.clone() }
    }

    /// Hex SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let mut hex = String::with_capacity(64);
        for b in Sha256::digest(&bytes) {
            write!(hex, "{b:02x}").expect("write to string");
        }
        hex
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.input_channels == 0 {
            return bad("input channels must be positive".into());
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return bad(format!("width multiplier {} must be positive", self.width_multiplier));
        }
        let Some(last) = self.rows.last() else {
            return bad("schedule has no rows".into());
        };
        if !last.classifier || self.rows.iter().filter(|r| r.classifier).count() != 1 {
            return bad("exactly one classifier row, placed last, is required".into());
        }
        for (i, row) in self.rows.iter().enumerate() {
            let row_no = i + 1;
            if row.convs.is_empty() || row.repeat == 0 {
                return bad(format!("row {row_no} is empty"));
            }
            if row.classifier && (row.residual || row.repeat != 1 || row.convs.len() != 1) {
                return bad(format!("classifier row {row_no} must be a single plain conv"));
            }
            if !row.residual && row.convs.len() != 1 {
                return bad(format!("plain row {row_no} must hold one conv"));
            }
            for c in &row.convs {
                if c.kernel % 2 == 0 || c.channels == 0 || c.dilation == 0 || !(1..=2).contains(&c.stride) {
                    return bad(format!("row {row_no} has invalid conv {c:?}"));
                }
            }
            let downsamplers = row.convs.iter().filter(|c| c.stride == 2).count();
            if downsamplers > 1 || (downsamplers == 1 && row.repeat != 1) {
                return bad(format!("row {row_no} must downsample at most once"));
            }
        }
        let total: usize = self.rows.iter().map(StageRow::stride).product();
        if total != OUTPUT_STRIDE {
            return bad(format!("total stride {total}, expected {OUTPUT_STRIDE}"));
        }
        Ok(())
    }

    /// Channel count after width scaling. The classifier keeps its classes.
    pub fn scaled_channels(&self, conv: &ConvSpec, classifier: bool) -> usize {
        if classifier {
            conv.channels
        } else {
            ((conv.channels as f64 * self.width_multiplier).round() as usize).max(1)
        }
    }

    /// Expands the schedule into concrete layers.
    pub fn plan(&self) -> Result<Vec<RowPlan>> {
        self.validate()?;
        let mut channels = self.input_channels;
        let mut rows = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let mut blocks = Vec::with_capacity(row.repeat);
            for _ in 0..row.repeat {
                let block_in = channels;
                let mut convs = Vec::with_capacity(row.convs.len());
                for c in &row.convs {
                    let out = self.scaled_channels(c, row.classifier);
                    let p = ConvParams::new(channels, out, c.kernel).with_stride(c.stride).with_dilation(c.dilation);
                    convs.push(p);
                    channels = out;
                }
                let kind = if row.classifier {
                    BlockKind::Classifier
                } else if row.residual {
                    let stride = row.stride();
                    let projection = (block_in != channels || stride != 1)
                        .then(|| ConvParams::new(block_in, channels, 1).with_stride(stride));
                    BlockKind::Residual { projection }
                } else {
                    BlockKind::Plain
                };
                blocks.push(BlockPlan { convs, kind });
            }
            rows.push(RowPlan { blocks });
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockKind {
    /// conv → BN → ReLU.
    Plain,
    /// `shortcut(x) + F(x)`; `projection` is a 1×1 conv followed by BN.
    Residual { projection: Option<ConvParams> },
    /// Bare conv with bias.
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub convs: Vec<ConvParams>,
    pub kind: BlockKind,
}

impl BlockPlan {
    pub fn out_channels(&self) -> usize {
        self.convs.last().expect("non-empty block").out_channels
    }

    /// Trainable scalars: conv weights, BN scale and shift, classifier bias.
    pub fn param_count(&self) -> usize {
        let weights = |p: &ConvParams| p.weight_shape().iter().product::<usize>();
        let bn = |p: &ConvParams| 2 * p.out_channels;
        match &self.kind {
            BlockKind::Classifier => self.convs.iter().map(|p| weights(p) + p.out_channels).sum(),
            kind => {
                let main: usize = self.convs.iter().map(|p| weights(p) + bn(p)).sum();
                let proj = match kind {
                    BlockKind::Residual { projection: Some(p) } => weights(p) + bn(p),
                    _ => 0,
                };
                main + proj
            }
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.convs.iter().try_fold((h, w), |(h, w), p| Ok(p.output_extent(h, w)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowPlan {
    pub blocks: Vec<BlockPlan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RowShape {
    pub row: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeTable {
    pub input: (usize, usize),
    pub rows: Vec<RowShape>,
    pub total_params: usize,
}

impl ShapeTable {
    /// Aligned text rendering, one line per row.
    pub fn render(&self) -> String {
        let mut out = format!("input {}x{}\n{:>4}  {:>12}  {:>9}  {:>12}\n", self.input.0, self.input.1, "row", "output", "channels", "params");
        for r in &self.rows {
            let extent = format!("{}x{}", r.height, r.width);
            writeln!(out, "{:>4}  {:>12}  {:>9}  {:>12}", r.row, extent, r.channels, r.params).expect("write");
        }
        writeln!(out, "total parameters {}", self.total_params).expect("write");
        out
    }
}

/// Per-row output extents and parameter counts, computed without
/// allocating any weights.
pub fn analyze_shapes(spec: &ArchSpec, input: (usize, usize)) -> Result<ShapeTable> {
    let (h0, w0) = input;
    if h0 == 0 || w0 == 0 || h0 % OUTPUT_STRIDE != 0 || w0 % OUTPUT_STRIDE != 0 {
        return Err(Error::NotDivisible(h0, w0));
    }
    let (mut h, mut w) = input;
    let mut rows = Vec::new();
    for (i, row) in spec.plan()?.iter().enumerate() {
        let mut params = 0;
        for block in &row.blocks {
            (h, w) = block.output_extent(h, w)?;
            params += block.param_count();
        }
        let channels = row.blocks.last().expect("non-empty row").out_channels();
        rows.push(RowShape { row: i + 1, channels, height: h, width: w, params });
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    Ok(ShapeTable { input, rows, total_params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_specs_parse_and_hash_stably() {
        let full = ArchSpec::full();
        assert_eq!(full.rows.len(), 13);
        assert_eq!(full.digest(), ArchSpec::full().digest());
        assert_ne!(full.digest(), ArchSpec::desk().digest());
        assert_eq!(ArchSpec::from_json(&full.to_json()).unwrap(), full);
    }

    #[test]
    fn desk_channels_are_sixteenth_width() {
        let plan = ArchSpec::desk().plan().unwrap();
        assert_eq!(plan[0].blocks[0].out_channels(), 4);
        assert_eq!(plan[10].blocks[0].out_channels(), 256);
        assert_eq!(plan[12].blocks[0].out_channels(), 2);
    }

    #[test]
    fn projections_follow_channel_or_stride_change() {
        let plan = ArchSpec::full().plan().unwrap();
        let has_proj = |r: usize, b: usize| matches!(plan[r].blocks[b].kind, BlockKind::Residual { projection: Some(_) });
        assert!(has_proj(1, 0));
        assert!(!has_proj(2, 0) && !has_proj(2, 1));
        assert!(has_proj(7, 0));
        assert!(!has_proj(8, 1));
        assert!(has_proj(9, 0) && has_proj(10, 0));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = ArchSpec::desk();
        spec.rows[1].convs[1].stride = 2;
        assert!(spec.validate().is_err());
        let mut spec = ArchSpec::desk();
        spec.rows.pop();
        assert!(spec.validate().is_err());
        let mut spec = ArchSpec::desk();
        spec.rows[3].convs[0].stride = 1;
        assert!(spec.validate().is_err());
        let mut spec = ArchSpec::desk();
        spec.rows[0].convs[0].kernel = 2;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn non_divisible_input_rejected() {
        assert!(matches!(analyze_shapes(&ArchSpec::desk(), (60, 64)), Err(Error::NotDivisible(60, 64))));
    }
}
