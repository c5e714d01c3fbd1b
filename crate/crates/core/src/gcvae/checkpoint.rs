//! Model checkpoints: a JSON manifest (architecture, topology, normalization
//! statistics, tensor index) plus an adjacent binary payload of little-endian
//! 64-bit floats, tensors concatenated in manifest order. Round-trips are
//! bit-exact.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Architecture, ModelError, ModelParams};
use crate::mesh::{write_atomic, Topology};
use crate::numerics::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    site: String,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    architecture: Architecture,
    topology_fingerprint: String,
    n_vertices: usize,
    faces: Vec<[usize; 3]>,
    normalization: Vec<BnEntry>,
    tensors: Vec<TensorEntry>,
    payload: String,
}

fn payload_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<path>` (JSON manifest) and `<path with .bin>` (tensor payload).
pub fn save_model(model: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let bin_path = payload_path(path);
    let tensors = model.trainable_tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let normalization = model
        .bn_sites()
        .iter()
        .enumerate()
        .map(|(i, bn)| BnEntry {
            site: format!("bn{i}"),
            mean: bn.running_mean.data().to_vec(),
            var: bn.running_var.data().to_vec(),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: model.arch.clone(),
        topology_fingerprint: model.fingerprint().to_string(),
        n_vertices: model.n_vertices(),
        faces: model.topology().faces().to_vec(),
        normalization,
        tensors: entries,
        payload: bin_path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("model.bin")
            .to_string(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ModelError::Corrupted(format!("manifest serialization: {e}")))?;
    write_atomic(path, json.as_bytes()).map_err(|e| io_err(path, e))?;
    write_atomic(&bin_path, &payload).map_err(|e| io_err(&bin_path, e))?;
    Ok(())
}

/// Loads a checkpoint, rebuilding the topology from the stored face list and
/// verifying version, fingerprint, and payload size.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| ModelError::Corrupted(format!("manifest parse: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let topology = Arc::new(Topology::build(manifest.n_vertices, manifest.faces.clone())?);
    if topology.fingerprint() != manifest.topology_fingerprint {
        return Err(ModelError::FingerprintMismatch {
            mesh: topology.fingerprint().to_string(),
            model: manifest.topology_fingerprint.clone(),
        });
    }

    let bin_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let bytes = std::fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Corrupted(format!(
            "payload length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut model = ModelParams::init(manifest.architecture.clone(), topology, 0);
    {
        let mut slots = model.trainable_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(ModelError::Corrupted(format!(
                "tensor index lists {} tensors, architecture expects {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for (slot, entry) in slots.iter_mut().zip(&manifest.tensors) {
            let len: usize = entry.shape.iter().product();
            if entry.shape != slot.shape() {
                return Err(ModelError::Corrupted(format!(
                    "tensor {} has shape {:?}, architecture expects {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let end = entry.offset + len;
            if end > values.len() {
                return Err(ModelError::Corrupted(format!(
                    "tensor {} spans {}..{} but payload holds {} values",
                    entry.name,
                    entry.offset,
                    end,
                    values.len()
                )));
            }
            **slot = Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec())?;
        }
    }
    {
        let mut sites = model.bn_sites_mut();
        if sites.len() != manifest.normalization.len() {
            return Err(ModelError::Corrupted(format!(
                "{} normalization sites in manifest, architecture expects {}",
                manifest.normalization.len(),
                sites.len()
            )));
        }
        for (site, entry) in sites.iter_mut().zip(&manifest.normalization) {
            if entry.mean.len() != site.running_mean.len()
                || entry.var.len() != site.running_var.len()
            {
                return Err(ModelError::Corrupted(format!(
                    "normalization site {} has wrong width",
                    entry.site
                )));
            }
            site.running_mean = Tensor::new(vec![1, entry.mean.len()], entry.mean.clone())?;
            site.running_var = Tensor::new(vec![1, entry.var.len()], entry.var.clone())?;
        }
    }
    Ok(model)
}
