//! Checkpoint archives: one safetensors file whose header metadata carries
//! a JSON manifest (architecture, preprocessing, lineage, step counter and
//! a SHA-256 over the tensor payload).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};
use crate::verifier::{Lineage, VerifierModel, VerifierSpec};

pub const FORMAT: &str = "maskmatch-checkpoint/1";
const MANIFEST_KEY: &str = "maskmatch.manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Backbone and head.
    Verifier,
    /// Backbone only, as left by contrastive pretraining.
    Representation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub kind: CheckpointKind,
    pub architecture_name: String,
    pub embedding_dim: usize,
    pub spec: VerifierSpec,
    pub frozen_fraction: f64,
    pub lineage: Lineage,
    pub dtype: String,
    pub sha256: String,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn st_dtype(dtype: DType) -> Result<Dtype> {
    match dtype {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(ModelError::Config(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(ModelError::Config(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], shape: &[usize], dtype: Dtype) -> Result<Tensor> {
    let t = match dtype {
        Dtype::F32 => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(ModelError::Config(format!("unsupported checkpoint dtype {other:?}"))),
    };
    Ok(t)
}

/// Digest over names, shapes and bytes, in name order.
fn digest<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [u8])>) -> String {
    let mut sorted: Vec<_> = entries.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, shape, bytes) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

fn write(model: &VerifierModel, kind: CheckpointKind, path: &Path) -> Result<CheckpointManifest> {
    let dtype = st_dtype(model.dtype())?;
    let mut entries = Vec::new();
    for p in model.params() {
        if kind == CheckpointKind::Representation && !p.name.starts_with("backbone.") {
            continue;
        }
        let t = p.var.as_tensor();
        entries.push(Entry { name: p.name.clone(), shape: t.dims().to_vec(), bytes: tensor_bytes(t)? });
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        kind,
        architecture_name: model.spec().backbone.architecture_name().into(),
        embedding_dim: model.embedding_dim(),
        spec: model.spec().clone(),
        frozen_fraction: model.frozen_fraction(),
        lineage: model.lineage().clone(),
        dtype: format!("{dtype:?}"),
        sha256: digest(entries.iter().map(|e| (e.name.as_str(), e.shape.as_slice(), e.bytes.as_slice()))),
    };
    let meta = HashMap::from([(MANIFEST_KEY.to_string(), serde_json::to_string(&manifest).expect("manifest serialises"))]);
    let views = entries
        .iter()
        .map(|e| Ok((e.name.clone(), TensorView::new(dtype, e.shape.clone(), &e.bytes).map_err(|err| bad(path, err))?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| bad(path, e))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ModelError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| ModelError::io(path, e))?;
    Ok(manifest)
}

fn bad(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint { path: path.to_path_buf(), message: e.to_string() }
}

/// Writes backbone and head.
pub fn save_verifier(model: &VerifierModel, path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    write(model, CheckpointKind::Verifier, path.as_ref())
}

/// Writes the backbone only.
pub fn save_representation(model: &VerifierModel, path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    write(model, CheckpointKind::Representation, path.as_ref())
}

fn manifest_of(st_meta: &Option<HashMap<String, String>>, path: &Path) -> Result<CheckpointManifest> {
    let text = st_meta.as_ref().and_then(|m| m.get(MANIFEST_KEY)).ok_or_else(|| bad(path, "no manifest in header"))?;
    let manifest: CheckpointManifest = serde_json::from_str(text).map_err(|e| bad(path, format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(bad(path, format!("unsupported format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Manifest only, without verifying the payload.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(path, e))?;
    manifest_of(meta.metadata(), path)
}

/// Loads a checkpoint as a verifier after checking its digest. A
/// representation checkpoint gets a fresh head initialised from
/// `head_seed`, and its id becomes the model's base.
pub fn load_model(path: impl AsRef<Path>, head_seed: u64) -> Result<VerifierModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ModelError::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(path, e))?;
    let manifest = manifest_of(meta.metadata(), path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(path, e))?;
    let tensors = st.tensors();
    let actual = digest(tensors.iter().map(|(n, v)| (n.as_str(), v.shape(), v.data())));
    if actual != manifest.sha256 {
        return Err(ModelError::Checksum { path: path.to_path_buf(), expected: manifest.sha256, actual });
    }
    let dtype = match tensors.first().map(|(_, v)| v.dtype()) {
        Some(Dtype::F64) => DType::F64,
        _ => DType::F32,
    };
    let mut model = VerifierModel::with_dtype(manifest.spec.clone(), head_seed, dtype)?;
    let by_name: HashMap<&str, &TensorView> = tensors.iter().map(|(n, v)| (n.as_str(), v)).collect();
    for p in model.params() {
        let wanted = manifest.kind == CheckpointKind::Verifier || p.name.starts_with("backbone.");
        match by_name.get(p.name.as_str()) {
            Some(v) => model.set_param(&p.name, &tensor_from_bytes(v.data(), v.shape(), v.dtype())?)?,
            None if wanted => return Err(bad(path, format!("missing tensor {}", p.name))),
            None => {}
        }
    }
    match manifest.kind {
        CheckpointKind::Verifier => {
            model.set_frozen_fraction(manifest.frozen_fraction)?;
            model.set_lineage(manifest.lineage);
        }
        CheckpointKind::Representation => {
            model.set_lineage(Lineage { checkpoint_id: String::new(), base: Some(manifest.lineage.checkpoint_id), step: 0 });
        }
    }
    Ok(model)
}
