//! Checkpoint container: a safetensors file whose metadata block carries the
//! format version, model config, vocabulary hash, seed and category ids.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::DType;
use safetensors::{tensor::TensorView, Dtype, SafeTensors};

use super::params::ParamStore;
use super::{Model, ModelConfig, ModelError, Result};

pub const CHECKPOINT_VERSION: &str = "1";
const FORMAT: &str = "phenocompose-checkpoint";
const META_KEY: &str = "phenocompose";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_hash: String,
    pub seed: u64,
    pub category_ids: Vec<String>,
    pub steps: usize,
}

fn meta_err(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    let dtype = ckpt.model.dtype();
    for (name, var) in ckpt.model.params.iter() {
        let flat = var.as_tensor().flatten_all()?;
        let bytes: Vec<u8> = match dtype {
            DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            _ => flat.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        blobs.push((name.to_string(), var.dims().to_vec(), bytes));
    }
    let st_dtype = if dtype == DType::F64 { Dtype::F64 } else { Dtype::F32 };
    let views = blobs
        .iter()
        .map(|(n, shape, bytes)| Ok((n.clone(), TensorView::new(st_dtype, shape.clone(), bytes).map_err(|e| meta_err(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let fields = BTreeMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("config".to_string(), serde_json::to_string(&ckpt.model.config).map_err(|e| meta_err(e.to_string()))?),
        ("vocab_hash".to_string(), ckpt.vocab_hash.clone()),
        ("seed".to_string(), ckpt.seed.to_string()),
        ("categories".to_string(), serde_json::to_string(&ckpt.category_ids).map_err(|e| meta_err(e.to_string()))?),
        ("steps".to_string(), ckpt.steps.to_string()),
    ]);
    // a single key keeps the header byte-stable
    let metadata = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&fields).map_err(|e| meta_err(e.to_string()))?)]);
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| meta_err(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint. When `expected_vocab_hash` is given it must match the
/// hash stored at training time.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| meta_err(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| meta_err("missing metadata block"))?;
    let meta: BTreeMap<String, String> = serde_json::from_str(raw).map_err(|e| meta_err(e.to_string()))?;
    let field = |k: &str| meta.get(k).cloned().ok_or_else(|| meta_err(format!("missing metadata field {k}")));
    if field("format")? != FORMAT {
        return Err(meta_err("not a phenocompose checkpoint"));
    }
    let version = field("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(meta_err(format!("unsupported checkpoint version {version}")));
    }
    let vocab_hash = field("vocab_hash")?;
    if let Some(expected) = expected_vocab_hash {
        if expected != vocab_hash {
            return Err(meta_err(format!(
                "vocabulary hash mismatch: checkpoint {vocab_hash}, vocabulary {expected}"
            )));
        }
    }
    let config: ModelConfig = serde_json::from_str(&field("config")?).map_err(|e| meta_err(e.to_string()))?;
    config.validate()?;
    let category_ids: Vec<String> =
        serde_json::from_str(&field("categories")?).map_err(|e| meta_err(e.to_string()))?;
    let seed = field("seed")?.parse().map_err(|_| meta_err("bad seed"))?;
    let steps = field("steps")?.parse().map_err(|_| meta_err("bad steps"))?;

    // Shapes and names come from a freshly built model; values from the file.
    let model = Model::new(config, 0)?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| meta_err(e.to_string()))?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    if tensors.len() != names.len() {
        return Err(meta_err(format!("expected {} tensors, found {}", names.len(), tensors.len())));
    }
    let mut store = ParamStore::new(model.dtype());
    for name in names {
        let view = tensors.tensor(&name).map_err(|_| meta_err(format!("missing tensor {name}")))?;
        let expected = model.params.get(&name)?.dims().to_vec();
        if view.shape() != expected.as_slice() {
            return Err(meta_err(format!("tensor {name} has shape {:?}, expected {expected:?}", view.shape())));
        }
        let values: Vec<f64> = match view.dtype() {
            Dtype::F64 => view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => {
                view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
            }
            other => return Err(meta_err(format!("unsupported dtype {other:?}"))),
        };
        store.insert(&name, values, &expected)?;
    }
    Ok(Checkpoint { model: Model { config: model.config, params: store }, vocab_hash, seed, category_ids, steps })
}
