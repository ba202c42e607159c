//! Network checkpoints.
//!
//! A checkpoint is the magic `LSCKPT1\n`, one JSON manifest line holding the
//! architecture, its SHA-256 and the name and shape of every stored tensor,
//! a newline, then each tensor's values as little-endian `f64` in manifest
//! order. Batch-norm running statistics are stored after the parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use liverseg_tensor::Tensor;

use crate::arch::ArchSpec;
use crate::cascade::CascadeModel;
use crate::error::{Error, Result};
use crate::network::Network;

pub const CHECKPOINT_MAGIC: &[u8] = b"LSCKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_sha256: String,
    pub spec: ArchSpec,
    pub tensors: Vec<TensorEntry>,
}

/// Every stored tensor of `net` in manifest order.
fn tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> =
        net.params().params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for (name, s) in net.stat_names().iter().zip(net.stats()) {
        let c = s.channels();
        out.push((format!("{name}.running_mean"), Tensor::new(&[c], s.mean.clone()).expect("stat length")));
        out.push((format!("{name}.running_var"), Tensor::new(&[c], s.var.clone()).expect("stat length")));
    }
    out
}

pub fn encode(net: &Network) -> Result<Vec<u8>> {
    let tensors = tensors(net);
    let manifest = Manifest {
        spec_sha256: net.spec().digest(),
        spec: net.spec().clone(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let mut out = CHECKPOINT_MAGIC.to_vec();
    serde_json::to_writer(&mut out, &manifest)?;
    out.push(b'\n');
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or(Error::BadMagic { expected: "LSCKPT1\\n" })?;
    let newline =
        rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Header("missing manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&rest[..newline]).map_err(|e| Error::Header(e.to_string()))?;
    if manifest.spec.digest() != manifest.spec_sha256 {
        return Err(Error::Checkpoint("architecture digest does not match the embedded spec".into()));
    }
    let mut net = Network::build(&manifest.spec, 0)?;
    let expected = tensors(&net);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!("{} tensors stored, {} expected", manifest.tensors.len(), expected.len())));
    }
    let payload = &rest[newline + 1..];
    let total: usize = expected.iter().map(|(_, t)| t.numel()).sum();
    if payload.len() != total * 8 {
        return Err(Error::PayloadLength { expected: total * 8, actual: payload.len() });
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, t), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("stored {} {:?}, expected {name} {:?}", entry.name, entry.shape, t.shape())));
        }
        loaded.push(values.by_ref().take(t.numel()).collect::<Vec<f64>>());
    }
    let n_params = net.params().len();
    for (p, data) in net.params_mut().params_mut().iter_mut().zip(&loaded) {
        p.value.data_mut().copy_from_slice(data);
    }
    for (i, s) in net.stats_mut().iter_mut().enumerate() {
        s.mean.copy_from_slice(&loaded[n_params + 2 * i]);
        s.var.copy_from_slice(&loaded[n_params + 2 * i + 1]);
    }
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    decode(&fs::read(path)?)
}

/// File name of each cascade network inside a model directory.
pub fn model_file(stage: crate::cascade::Stage, class: crate::network::Class) -> String {
    let s = match stage {
        crate::cascade::Stage::One => 1,
        crate::cascade::Stage::Two => 2,
    };
    format!("stage{s}_{}.ckpt", class.name())
}

pub fn save_model(model: &CascadeModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (stage, class) in CascadeModel::slots() {
        save(model.network(stage, class), dir.join(model_file(stage, class)))?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<CascadeModel> {
    let dir = dir.as_ref();
    let get = |stage, class| load(dir.join(model_file(stage, class)));
    use crate::cascade::Stage::{One, Two};
    use crate::network::Class::{Lesion, Liver};
    let model = CascadeModel {
        stage1_liver: get(One, Liver)?,
        stage1_lesion: get(One, Lesion)?,
        stage2_liver: get(Two, Liver)?,
        stage2_lesion: get(Two, Lesion)?,
    };
    let base = model.stage1_liver.spec().with_input_channels(1);
    for (stage, class) in CascadeModel::slots() {
        if model.network(stage, class).spec().with_input_channels(1) != base {
            return Err(Error::Checkpoint(format!("{} uses a different architecture", model_file(stage, class))));
        }
    }
    Ok(model)
}
