//! On-disk layout of a session directory.
//!
//! ```text
//! <dir>/session.json          manifest (format version first)
//! <dir>/model.bin             trained model, if any
//! <dir>/dataset/<category>/…  uploaded images, original bytes
//! <dir>/inferences/<id>.<ext> evaluated test images
//! ```
//!
//! The manifest is replaced atomically, so a crash leaves either the old or
//! the new version behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{ActivityTracker, AgentToggle, DialogueHistory};
use crate::classifier::{codec, InferenceResult};
use crate::clock::Millis;
use crate::dataset::{DatasetError, DatasetManifest, TrainingDataset};
use crate::digest::sha256_hex;
use crate::session::{EventFrame, SessionPhase, SessionState, StoredInference};

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "session.json";
pub const MODEL_FILE: &str = "model.bin";
pub const DATASET_DIR: &str = "dataset";
pub const INFERENCE_DIR: &str = "inferences";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("manifest format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u64 },
    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),
    #[error("model file: {0}")]
    Model(#[from] codec::CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceEntry {
    pub result: InferenceResult,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub format_version: u64,
    pub id: String,
    pub created_at: Millis,
    pub rng_seed: u64,
    pub prompt_events: u64,
    pub phase: SessionPhase,
    pub toggle: AgentToggle,
    pub activity: ActivityTracker,
    pub history: DialogueHistory,
    pub frames: Vec<EventFrame>,
    pub dataset: DatasetManifest,
    /// SHA-256 of `model.bin`.
    pub model_digest: Option<String>,
    pub next_inference: u64,
    pub inferences: Vec<InferenceEntry>,
    pub last_montage_seeds: BTreeMap<String, u64>,
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn inference_file(result: &InferenceResult) -> String {
    let ext = if result.image_mime == "image/jpeg" { "jpg" } else { "png" };
    format!("{INFERENCE_DIR}/{}.{ext}", result.id)
}

pub(crate) fn manifest_of(id: &str, st: &SessionState) -> SessionManifest {
    SessionManifest {
        format_version: FORMAT_VERSION,
        id: id.to_string(),
        created_at: st.created_at,
        rng_seed: st.rng_seed,
        prompt_events: st.prompt_events,
        phase: st.phase,
        toggle: st.toggle,
        activity: st.activity,
        history: st.history.clone(),
        frames: st.frames.clone(),
        dataset: st.dataset.manifest(),
        model_digest: st.model.as_ref().map(|m| sha256_hex(&codec::encode(m))),
        next_inference: st.next_inference,
        inferences: st
            .inferences
            .values()
            .map(|i| InferenceEntry {
                file: inference_file(&i.result),
                result: i.result.clone(),
            })
            .collect(),
        last_montage_seeds: st.last_montage_seeds.clone(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Writes the manifest, the model and any inference images not yet on disk.
/// Dataset images are written by the dataset itself when uploaded.
pub(crate) fn save(dir: &Path, id: &str, st: &SessionState) -> Result<(), StoreError> {
    let manifest = manifest_of(id, st);
    for entry in &manifest.inferences {
        let path = dir.join(&entry.file);
        if !path.exists() {
            let bytes = &st.inferences[&entry.result.id].image;
            write_atomic(&path, bytes)?;
        }
    }
    let model_path = dir.join(MODEL_FILE);
    match &st.model {
        Some(m) => write_atomic(&model_path, &codec::encode(m))?,
        None if model_path.exists() => fs::remove_file(&model_path).map_err(|e| io_err(&model_path, e))?,
        None => {}
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

/// Reads and checks the manifest without touching the other files.
pub fn read_manifest(dir: &Path) -> Result<SessionManifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| StoreError::CorruptManifest("missing format_version".into()))?;
    if found != FORMAT_VERSION {
        return Err(StoreError::VersionMismatch { found });
    }
    serde_json::from_value(value).map_err(|e| StoreError::CorruptManifest(e.to_string()))
}

pub(crate) fn load(dir: &Path) -> Result<(String, SessionState), StoreError> {
    let manifest = read_manifest(dir)?;
    let dataset = TrainingDataset::from_manifest(manifest.dataset, &dir.join(DATASET_DIR))?;
    let model = match manifest.model_digest {
        Some(expected) => {
            let path = dir.join(MODEL_FILE);
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            if sha256_hex(&bytes) != expected {
                return Err(StoreError::CorruptManifest("model.bin digest mismatch".into()));
            }
            Some(codec::decode(&bytes)?)
        }
        None => None,
    };
    let mut inferences = BTreeMap::new();
    for entry in manifest.inferences {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        if sha256_hex(&bytes) != entry.result.image_digest {
            return Err(StoreError::CorruptManifest(format!(
                "{} digest mismatch",
                entry.file
            )));
        }
        inferences.insert(
            entry.result.id.clone(),
            StoredInference {
                result: entry.result,
                image: Arc::new(bytes),
            },
        );
    }
    let state = SessionState {
        phase: manifest.phase,
        created_at: manifest.created_at,
        rng_seed: manifest.rng_seed,
        prompt_events: manifest.prompt_events,
        dataset,
        history: manifest.history,
        model,
        inferences,
        next_inference: manifest.next_inference,
        toggle: manifest.toggle,
        activity: manifest.activity,
        frames: manifest.frames,
        last_montage_seeds: manifest.last_montage_seeds,
        training: false,
    };
    Ok((manifest.id, state))
}
