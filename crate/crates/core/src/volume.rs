//! CT and label volumes and the `CTVOL1` container.
//!
//! A file is the 7 magic bytes `CTVOL1\n`, one JSON header line
//! `{"shape":[d,h,w],"dtype":"i16"|"u8","spacing":[z,y,x]}`, a newline, then
//! the voxels as raw little-endian values in z-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"CTVOL1\n";
pub const HU_MIN: i16 = -2048;
pub const HU_MAX: i16 = 4095;

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const LESION: u8 = 2;

/// CT intensities in Hounsfield units, indexed `[z, y, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    voxels: Array3<i16>,
    spacing: [f64; 3],
}

/// Per-voxel labels: 0 background, 1 liver, 2 lesion.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    labels: Array3<u8>,
    spacing: [f64; 3],
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Header(format!("spacing {spacing:?} must be positive")))
    }
}

fn check_extent(dim: (usize, usize, usize)) -> Result<()> {
    if dim.0 == 0 || dim.1 == 0 || dim.2 == 0 {
        return Err(Error::ShapeMismatch(format!("empty volume {dim:?}")));
    }
    Ok(())
}

impl Volume {
    pub fn new(voxels: Array3<i16>, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        check_extent(voxels.dim())?;
        if let Some(&bad) = voxels.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(Error::HuOutOfRange(bad));
        }
        Ok(Self { voxels: voxels.as_standard_layout().to_owned(), spacing })
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// `(depth, height, width)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

impl LabelVolume {
    pub fn new(labels: Array3<u8>, spacing: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        check_extent(labels.dim())?;
        if let Some(&bad) = labels.iter().find(|&&v| v > LESION) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { labels: labels.as_standard_layout().to_owned(), spacing })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Voxels with label 1 or 2.
    pub fn liver_mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l == LIVER || l == LESION)
    }

    pub fn lesion_mask(&self) -> Array3<bool> {
        self.labels.mapv(|l| l == LESION)
    }
}

/// Either payload type of a `CTVOL1` file.
#[derive(Clone, Debug, PartialEq)]
pub enum CtVolume {
    Intensity(Volume),
    Labels(LabelVolume),
}

impl From<Volume> for CtVolume {
    fn from(v: Volume) -> Self {
        CtVolume::Intensity(v)
    }
}

impl From<LabelVolume> for CtVolume {
    fn from(v: LabelVolume) -> Self {
        CtVolume::Labels(v)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    dtype: String,
    spacing: [f64; 3],
}

pub fn encode(volume: &CtVolume) -> Result<Vec<u8>> {
    let (dim, dtype, spacing) = match volume {
        CtVolume::Intensity(v) => (v.dim(), "i16", v.spacing),
        CtVolume::Labels(v) => (v.dim(), "u8", v.spacing),
    };
    let header = Header { shape: [dim.0, dim.1, dim.2], dtype: dtype.to_string(), spacing };
    let mut out = MAGIC.to_vec();
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    match volume {
        CtVolume::Intensity(v) => v.voxels.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        CtVolume::Labels(v) => out.extend(v.labels.iter().copied()),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<CtVolume> {
    let rest = bytes.strip_prefix(MAGIC).ok_or(Error::BadMagic { expected: "CTVOL1\\n" })?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("missing header terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..newline]).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &rest[newline + 1..];
    let [d, h, w] = header.shape;
    let count = d
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::Header(format!("shape {:?} overflows", header.shape)))?;
    let elem = match header.dtype.as_str() {
        "i16" => 2,
        "u8" => 1,
        other => return Err(Error::UnknownDtype(other.to_string())),
    };
    if payload.len() != count * elem {
        return Err(Error::PayloadLength { expected: count * elem, actual: payload.len() });
    }
    let shape = (d, h, w);
    match elem {
        2 => {
            let voxels = payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
            let arr = Array3::from_shape_vec(shape, voxels).map_err(|e| Error::Header(e.to_string()))?;
            Ok(CtVolume::Intensity(Volume::new(arr, header.spacing)?))
        }
        _ => {
            let arr = Array3::from_shape_vec(shape, payload.to_vec()).map_err(|e| Error::Header(e.to_string()))?;
            Ok(CtVolume::Labels(LabelVolume::new(arr, header.spacing)?))
        }
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &CtVolume) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode(volume)?)?;
    f.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    decode(&fs::read(path)?)
}

pub fn read_intensity(path: impl AsRef<Path>) -> Result<Volume> {
    match read_volume(path)? {
        CtVolume::Intensity(v) => Ok(v),
        CtVolume::Labels(_) => Err(Error::UnknownDtype("u8 where i16 was expected".into())),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    match read_volume(path)? {
        CtVolume::Labels(v) => Ok(v),
        CtVolume::Intensity(_) => Err(Error::UnknownDtype("i16 where u8 was expected".into())),
    }
}
