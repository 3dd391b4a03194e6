//! Self-describing JSON checkpoints and the external weight-import format.
//!
//! A checkpoint echoes the model config, carries every parameter as a named
//! tensor and optionally the vocabulary and opaque trainer state.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, UniRes};
use crate::dataset::WordVocab;
use crate::nn::{Matrix, Scalar};

pub const CHECKPOINT_FORMAT: &str = "mres-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<WordVocab>,
    pub params: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &UniRes<T>, vocab: Option<&WordVocab>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(_, p)| TensorRecord {
                name: p.name.clone(),
                group: Some(p.group.clone()),
                shape: [p.value.rows(), p.value.cols()],
                data: p.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            vocab: vocab.cloned(),
            params,
            train_state: None,
        }
    }

    /// Rebuilds the model. Every parameter must be present exactly once with
    /// its expected shape.
    pub fn to_model<T: Scalar>(&self) -> Result<UniRes<T>, ModelError> {
        let mut model = UniRes::new(self.config.clone(), 0)?;
        let mut seen = HashSet::new();
        for rec in &self.params {
            let id = model
                .params()
                .find(&rec.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            if !seen.insert(rec.name.as_str()) {
                return Err(ModelError::Checkpoint(format!("parameter `{}` appears twice", rec.name)));
            }
            let value = record_matrix(rec, false)?;
            assign(&mut model, id, &rec.name, value)?;
        }
        if seen.len() != model.params().len() {
            let missing: Vec<&str> = model
                .params()
                .iter()
                .map(|(_, p)| p.name.as_str())
                .filter(|n| !seen.contains(n))
                .collect();
            return Err(ModelError::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        Ok(model)
    }
}

fn record_matrix<T: Scalar>(rec: &TensorRecord, transpose: bool) -> Result<Matrix<T>, ModelError> {
    let [r, c] = rec.shape;
    if r * c != rec.data.len() {
        return Err(ModelError::Checkpoint(format!(
            "tensor `{}` declares shape {r}x{c} but holds {} values",
            rec.name,
            rec.data.len()
        )));
    }
    if rec.data.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Checkpoint(format!("tensor `{}` holds non-finite values", rec.name)));
    }
    let m = Matrix::from_vec(r, c, rec.data.iter().map(|&v| T::of(v)).collect());
    Ok(if transpose { m.transpose() } else { m })
}

fn assign<T: Scalar>(
    model: &mut UniRes<T>,
    id: crate::nn::ParamId,
    name: &str,
    value: Matrix<T>,
) -> Result<(), ModelError> {
    let slot = model.params_mut().value_mut(id);
    if slot.shape() != value.shape() {
        return Err(ModelError::ShapeMismatch(format!(
            "parameter `{name}` expects {:?}, got {:?}",
            slot.shape(),
            value.shape()
        )));
    }
    *slot = value;
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    let text = serde_json::to_string(checkpoint).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Checkpoint(format!("unexpected format tag `{}`", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    if let Some(v) = ckpt.vocab.as_mut() {
        v.rebuild_index();
    }
    Ok(ckpt)
}

/// Loads a model, rejecting the file when `expected` is given and differs
/// from the stored config.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(UniRes<T>, Checkpoint), ModelError> {
    let ckpt = read_checkpoint(path)?;
    if let Some(cfg) = expected {
        if cfg != &ckpt.config {
            return Err(ModelError::ConfigMismatch(format!(
                "file has {}, expected {}",
                serde_json::to_string(&ckpt.config).unwrap_or_default(),
                serde_json::to_string(cfg).unwrap_or_default()
            )));
        }
    }
    let model = ckpt.to_model()?;
    Ok((model, ckpt))
}

/// Maps tensor names of an externally converted checkpoint onto internal
/// parameter names. `transpose` lists external names stored as
/// `out × in` that must be flipped.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportManifest {
    /// Tensors file, relative to the manifest.
    pub tensors: String,
    pub map: BTreeMap<String, String>,
    #[serde(default)]
    pub transpose: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ImportReport {
    pub imported: Vec<String>,
    /// Internal parameters left at their initial values.
    pub untouched: Vec<String>,
    /// External tensors the manifest does not mention.
    pub unused: Vec<String>,
}

#[derive(Deserialize)]
struct TensorFile {
    tensors: Vec<TensorRecord>,
}

/// Copies mapped external tensors into `model`.
pub fn import_weights<T: Scalar>(model: &mut UniRes<T>, manifest_path: &Path) -> Result<ImportReport, ModelError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: ImportManifest =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("import manifest: {e}")))?;
    let tensors_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.tensors);
    let text = fs::read_to_string(&tensors_path).map_err(io_err(&tensors_path))?;
    let file: TensorFile =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("import tensors: {e}")))?;

    let transpose: HashSet<&str> = manifest.transpose.iter().map(String::as_str).collect();
    let mut report = ImportReport::default();
    let mut written = HashSet::new();
    for rec in &file.tensors {
        let Some(internal) = manifest.map.get(&rec.name) else {
            report.unused.push(rec.name.clone());
            continue;
        };
        let id = model
            .params()
            .find(internal)
            .ok_or_else(|| ModelError::Checkpoint(format!("manifest targets unknown parameter `{internal}`")))?;
        let value = record_matrix(rec, transpose.contains(rec.name.as_str()))?;
        assign(model, id, internal, value)?;
        written.insert(internal.clone());
        report.imported.push(internal.clone());
    }
    for (external, internal) in &manifest.map {
        if !written.contains(internal) {
            return Err(ModelError::Checkpoint(format!(
                "manifest entry `{external}` has no tensor in {}",
                tensors_path.display()
            )));
        }
    }
    report.untouched = model
        .params()
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| !written.contains(n))
        .collect();
    Ok(report)
}
