//! On-disk model format: a JSON manifest plus a raw little-endian f32 blob.
//!
//! The manifest (`<stem>.json`) holds the model spec, a tensor directory
//! (`name`, `shape`, byte `offset`, `kind`) and every quantizer's scalars.
//! The blob (`<stem>.bin`) is the concatenation of all parameter and buffer
//! tensors in directory order, 4 bytes per element.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelSpec, ParamKind};
use crate::error::{Error, Result};
use crate::quantizer::QuantParams;
use crate::tensor::Tensor;

pub const FORMAT: &str = "qfd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub kind: ParamKind,
    pub role: TensorRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantEntry {
    pub name: String,
    #[serde(flatten)]
    pub params: QuantParams,
    pub calibrated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    pub quantizers: Vec<QuantEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest path.
pub fn save(
    model: &Model<f32>,
    dir: &Path,
    stem: &str,
    metadata: serde_json::Value,
) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let all = model
        .params
        .iter()
        .map(|p| (p, TensorRole::Param))
        .chain(model.buffers.iter().map(|p| (p, TensorRole::Buffer)));
    for (p, role) in all {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
            kind: p.kind,
            role,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        spec: model.spec.clone(),
        blob: blob_name.clone(),
        blob_bytes: blob.len() as u64,
        tensors,
        quantizers: model
            .quantizers
            .iter()
            .map(|q| QuantEntry {
                name: q.name.clone(),
                params: q.params,
                calibrated: q.calibrated,
            })
            .collect(),
        metadata,
    };
    fs::write(dir.join(&blob_name), &blob)?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {:?} version {}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save`], checking every tensor name and
/// shape against the architecture in the manifest.
pub fn load(path: &Path) -> Result<(Model<f32>, Manifest)> {
    let manifest = read_manifest(path)?;
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io_at(&blob_path, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Truncated {
            path: blob_path,
            expected: manifest.blob_bytes,
            actual: blob.len() as u64,
        });
    }
    let mut model: Model<f32> = build_model(&manifest.spec, 0)?;
    let expected = model.params.len() + model.buffers.len();
    if manifest.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {expected}",
            manifest.tensors.len()
        )));
    }
    for entry in &manifest.tensors {
        let store = match entry.role {
            TensorRole::Param => &mut model.params,
            TensorRole::Buffer => &mut model.buffers,
        };
        let slot = store
            .iter_mut()
            .find(|p| p.name == entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {:?}", entry.name)))?;
        if slot.value.shape() != entry.shape.as_slice() {
            return Err(Error::shape(
                "checkpoint tensor",
                &entry.shape,
                slot.value.shape(),
            ));
        }
        let start = usize::try_from(entry.offset)
            .map_err(|_| Error::Checkpoint("offset overflow".into()))?;
        let end = start + 4 * slot.value.len();
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {:?} runs past the blob", entry.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        slot.value = Tensor::new(&entry.shape, data)?;
    }
    if manifest.quantizers.len() != model.quantizers.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} quantizers, architecture has {}",
            manifest.quantizers.len(),
            model.quantizers.len()
        )));
    }
    for entry in &manifest.quantizers {
        let site = model
            .quantizers
            .iter_mut()
            .find(|q| q.name == entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown quantizer {:?}", entry.name)))?;
        if site.params.mode != entry.params.mode || site.params.bits != entry.params.bits {
            return Err(Error::Checkpoint(format!(
                "quantizer {:?} disagrees with the policy",
                entry.name
            )));
        }
        entry.params.validate()?;
        site.params = entry.params;
        site.calibrated = entry.calibrated;
    }
    Ok((model, manifest))
}
