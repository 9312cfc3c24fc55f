//! One user's workbench: dataset, model, inference results, dialogue, and
//! the two agent contexts.
//!
//! All mutable state sits behind a single lock that is never held across an
//! MLLM call. Every change that produces a user-visible reply or event is
//! also published as an [`EventFrame`] with a per-session sequence number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::agents::{ActivityTracker, AgentToggle, DialogueHistory, EventKind, Message, Role};
use crate::classifier::{ClassifierError, ClassifierModel, Hyperparams, InferenceResult, TrainingSummary};
use crate::clock::{Clock, Millis};
use crate::dataset::{decode_image, Category, DatasetError, TrainingDataset, UploadReport};
use crate::digest::{mix64, sha256_hex, sha256_parts};
use crate::features::FeatureExtractor;
use crate::mllm::{AgentContext, MllmError};
use crate::montage::{render_montage, Montage, MontageError};
use crate::prompts::{serialize_inference_result, PromptError};
use crate::store::{self, StoreError};

const EVENT_CHANNEL_CAPACITY: usize = 256;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub language: String,
    pub hyperparams: Hyperparams,
    pub active_interval: Duration,
    /// Upper bound on the serialized chat log sent to the active agent.
    pub chat_log_max_chars: Option<usize>,
    pub active_enabled_by_default: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            language: "English".to_string(),
            hyperparams: Hyperparams::default(),
            active_interval: Duration::from_secs(60),
            chat_log_max_chars: None,
            active_enabled_by_default: true,
        }
    }
}

/// Collaborators a session needs but does not own the policy of.
pub struct SessionDeps {
    pub clock: Arc<dyn Clock>,
    pub extractor: Arc<dyn FeatureExtractor>,
    pub passive: AgentContext,
    pub active: AgentContext,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("the session has not been started")]
    NotStarted,
    #[error("the session was already started")]
    AlreadyStarted,
    #[error("message is empty")]
    EmptyMessage,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("category {0:?} has no images")]
    EmptyCategory(String),
    #[error("unknown inference result {0:?}")]
    UnknownInference(String),
    #[error("no trained model")]
    NoModel,
    #[error("a training run is already in progress")]
    Busy,
    #[error("agent backend failure: {0}")]
    AgentBackendFailure(MllmError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Montage(#[from] MontageError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SessionError {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::NotStarted => "NotStarted",
            SessionError::AlreadyStarted => "AlreadyStarted",
            SessionError::EmptyMessage => "EmptyMessage",
            SessionError::UnknownCategory(_) => "UnknownCategory",
            SessionError::EmptyCategory(_) => "EmptyCategory",
            SessionError::UnknownInference(_) => "UnknownInference",
            SessionError::NoModel => "NoModel",
            SessionError::Busy => "Busy",
            SessionError::AgentBackendFailure(_) => "AgentBackendFailure",
            SessionError::Dataset(e) => match e {
                DatasetError::EmptyName => "EmptyName",
                DatasetError::DuplicateName(_) => "DuplicateName",
                DatasetError::CategoryLimitExceeded => "CategoryLimitExceeded",
                DatasetError::UnknownCategory(_) => "UnknownCategory",
                DatasetError::UndecodableImage { .. } => "UndecodableImage",
                DatasetError::Storage(_) => "StorageError",
            },
            SessionError::Classifier(e) => match e {
                ClassifierError::InsufficientCategories(_) => "InsufficientCategories",
                ClassifierError::ExtractorMismatch { .. } => "ExtractorMismatch",
                ClassifierError::UndecodableImage(_) => "UndecodableImage",
                _ => "TrainingFailed",
            },
            SessionError::Prompt(_) => "PromptError",
            SessionError::Montage(MontageError::EmptyCategory(_)) => "EmptyCategory",
            SessionError::Montage(_) => "MontageError",
            SessionError::Store(_) => "StorageError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    New,
    AwaitingGoal,
    Active,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    ActiveAdvice,
    PassiveReply,
    TrainingDone,
    ErrorEvent,
}

impl FrameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::ActiveAdvice => "active_advice",
            FrameKind::PassiveReply => "passive_reply",
            FrameKind::TrainingDone => "training_done",
            FrameKind::ErrorEvent => "error_event",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFrame {
    pub seq: u64,
    pub kind: FrameKind,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredInference {
    pub result: InferenceResult,
    pub image: Arc<Vec<u8>>,
}

pub struct SessionState {
    pub(crate) phase: SessionPhase,
    pub(crate) created_at: Millis,
    pub(crate) rng_seed: u64,
    pub(crate) prompt_events: u64,
    pub(crate) dataset: TrainingDataset,
    pub(crate) history: DialogueHistory,
    pub(crate) model: Option<ClassifierModel>,
    pub(crate) inferences: BTreeMap<String, StoredInference>,
    pub(crate) next_inference: u64,
    pub(crate) toggle: AgentToggle,
    pub(crate) activity: ActivityTracker,
    pub(crate) frames: Vec<EventFrame>,
    pub(crate) last_montage_seeds: BTreeMap<String, u64>,
    pub(crate) training: bool,
}

impl SessionState {
    pub(crate) fn next_prompt_seed(&mut self) -> u64 {
        self.prompt_events += 1;
        mix64(self.rng_seed ^ self.prompt_events)
    }

    pub(crate) fn remember_montage_seeds(&mut self, montages: &[Montage]) {
        for m in montages {
            self.last_montage_seeds.insert(m.category_name.clone(), m.seed);
        }
    }
}

pub struct Session {
    id: String,
    config: SessionConfig,
    clock: Arc<dyn Clock>,
    extractor: Arc<dyn FeatureExtractor>,
    agents: (AgentContext, AgentContext),
    state: Mutex<SessionState>,
    events: broadcast::Sender<EventFrame>,
    root: Option<PathBuf>,
}

impl Session {
    /// An in-memory session. The RNG seed is derived from the id unless
    /// replaced with [`Session::with_seed`].
    pub fn new(id: impl Into<String>, config: SessionConfig, deps: SessionDeps) -> Self {
        let id = id.into();
        let rng_seed = seed_from_id(&id);
        let state = SessionState {
            phase: SessionPhase::New,
            created_at: deps.clock.now_ms(),
            rng_seed,
            prompt_events: 0,
            dataset: TrainingDataset::new(),
            history: DialogueHistory::default(),
            model: None,
            inferences: BTreeMap::new(),
            next_inference: 0,
            toggle: AgentToggle {
                active_enabled: config.active_enabled_by_default,
            },
            activity: ActivityTracker::default(),
            frames: Vec::new(),
            last_montage_seeds: BTreeMap::new(),
            training: false,
        };
        Self::assemble(id, config, deps, state, None)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        self.lock().rng_seed = seed;
        self
    }

    /// Binds the session to `dir`, writes everything it holds so far, and
    /// persists after every later mutation.
    pub fn with_storage(mut self, dir: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let dir = dir.into();
        {
            let mut st = self.lock();
            let dataset_root = dir.join(store::DATASET_DIR);
            st.dataset.write_all(&dataset_root)?;
            let mut rooted = TrainingDataset::from_manifest(st.dataset.manifest(), &dataset_root)?;
            std::mem::swap(&mut st.dataset, &mut rooted);
        }
        self.root = Some(dir);
        self.persist()?;
        Ok(self)
    }

    /// Restores a session written by [`Session::persist`].
    pub fn load(dir: &Path, config: SessionConfig, deps: SessionDeps) -> Result<Self, SessionError> {
        let (id, state) = store::load(dir)?;
        Ok(Self::assemble(id, config, deps, state, Some(dir.to_path_buf())))
    }

    fn assemble(
        id: String,
        config: SessionConfig,
        deps: SessionDeps,
        state: SessionState,
        root: Option<PathBuf>,
    ) -> Self {
        let (events, _) = broadcast::channel(EVENT_CHANNEL_CAPACITY);
        Self {
            id,
            config,
            clock: deps.clock,
            extractor: deps.extractor,
            agents: (deps.passive, deps.active),
            state: Mutex::new(state),
            events,
            root,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn storage_dir(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub(crate) fn agents(&self) -> &(AgentContext, AgentContext) {
        &self.agents
    }

    pub fn passive_agent(&self) -> &AgentContext {
        &self.agents.0
    }

    pub fn active_agent(&self) -> &AgentContext {
        &self.agents.1
    }

    pub(crate) fn now(&self) -> Millis {
        self.clock.now_ms()
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, SessionState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub(crate) fn emit(&self, st: &mut SessionState, kind: FrameKind, message: &Message) {
        let frame = EventFrame {
            seq: st.frames.len() as u64 + 1,
            kind,
            message: message.clone(),
        };
        st.frames.push(frame.clone());
        // no subscribers is fine
        let _ = self.events.send(frame);
    }

    pub(crate) fn autosave(&self, st: &SessionState) -> Result<(), SessionError> {
        if let Some(dir) = &self.root {
            store::save(dir, &self.id, st)?;
        }
        Ok(())
    }

    pub fn persist(&self) -> Result<(), SessionError> {
        let st = self.lock();
        self.autosave(&st)
    }

    /// Frames after `after` plus a receiver for everything emitted later.
    /// Both are taken under the session lock, so nothing falls in between.
    pub fn subscribe(&self, after: u64) -> (Vec<EventFrame>, broadcast::Receiver<EventFrame>) {
        let st = self.lock();
        let backlog = st.frames.iter().filter(|f| f.seq > after).cloned().collect();
        (backlog, self.events.subscribe())
    }

    pub fn frames(&self) -> Vec<EventFrame> {
        self.lock().frames.clone()
    }

    pub fn history(&self) -> Vec<Message> {
        self.lock().history.messages().to_vec()
    }

    pub fn phase(&self) -> SessionPhase {
        self.lock().phase
    }

    pub fn toggle(&self) -> AgentToggle {
        self.lock().toggle
    }

    pub fn activity(&self) -> ActivityTracker {
        self.lock().activity
    }

    pub fn rng_seed(&self) -> u64 {
        self.lock().rng_seed
    }

    pub fn created_at(&self) -> Millis {
        self.lock().created_at
    }

    pub fn categories(&self) -> Vec<Category> {
        self.lock().dataset.categories().to_vec()
    }

    pub fn dataset(&self) -> TrainingDataset {
        self.lock().dataset.clone()
    }

    pub fn model(&self) -> Option<ClassifierModel> {
        self.lock().model.clone()
    }

    pub fn inference(&self, id: &str) -> Option<StoredInference> {
        self.lock().inferences.get(id).cloned()
    }

    pub fn inferences(&self) -> Vec<InferenceResult> {
        self.lock().inferences.values().map(|i| i.result.clone()).collect()
    }

    /// Digest over everything that is persisted, for round-trip checks.
    pub fn state_digest(&self) -> String {
        let st = self.lock();
        let manifest = store::manifest_of(&self.id, &st);
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut parts: Vec<Vec<u8>> = vec![json];
        for (id, (_, bytes)) in st.dataset.blobs() {
            parts.push(id.as_bytes().to_vec());
            parts.push(bytes.to_vec());
        }
        for inf in st.inferences.values() {
            parts.push(inf.image.to_vec());
        }
        if let Some(m) = &st.model {
            parts.push(crate::classifier::codec::encode(m));
        }
        sha256_parts(parts.iter().map(|p| p.as_slice()))
    }

    fn log_event(&self, st: &mut SessionState, kind: EventKind, text: String) -> Message {
        let now = self.now();
        st.activity.record(now);
        st.history
            .append(Role::SystemEvent, text, now, Some(kind), vec![], None)
    }

    fn started(&self) -> Result<MutexGuard<'_, SessionState>, SessionError> {
        let st = self.lock();
        if st.phase == SessionPhase::New {
            return Err(SessionError::NotStarted);
        }
        Ok(st)
    }

    pub fn add_category(&self, name: &str) -> Result<Category, SessionError> {
        let mut st = self.started()?;
        let now = self.now();
        let cat = st.dataset.add_category(name, now)?.clone();
        self.log_event(&mut st, EventKind::Dataset, format!("Created the category '{}'.", cat.name));
        self.autosave(&st)?;
        Ok(cat)
    }

    pub fn remove_category(&self, name: &str) -> Result<(), SessionError> {
        let mut st = self.started()?;
        st.dataset.remove_category(name)?;
        st.last_montage_seeds.remove(name);
        self.log_event(&mut st, EventKind::Dataset, format!("Deleted the category '{name}'."));
        self.autosave(&st)?;
        Ok(())
    }

    pub fn rename_category(&self, old: &str, new: &str) -> Result<Category, SessionError> {
        let mut st = self.started()?;
        st.dataset.rename_category(old, new)?;
        let new = new.trim();
        if let Some(seed) = st.last_montage_seeds.remove(old) {
            st.last_montage_seeds.insert(new.to_string(), seed);
        }
        let cat = st.dataset.category(new).cloned().expect("renamed category exists");
        self.log_event(
            &mut st,
            EventKind::Dataset,
            format!("Renamed the category '{old}' to '{new}'."),
        );
        self.autosave(&st)?;
        Ok(cat)
    }

    pub fn upload_images<B: AsRef<[u8]>>(
        &self,
        category: &str,
        payloads: &[B],
    ) -> Result<UploadReport, SessionError> {
        let mut st = self.started()?;
        let result = st.dataset.upload_images(category, payloads);
        let text = match &result {
            Ok(report) => format!(
                "Added {} image(s) to the category '{category}'.",
                report.added.len()
            ),
            Err(e) => format!("Uploading images to the category '{category}' failed: {e}"),
        };
        if !matches!(result, Err(DatasetError::UnknownCategory(_))) {
            self.log_event(&mut st, EventKind::Dataset, text);
            self.autosave(&st)?;
        }
        Ok(result?)
    }

    /// Trains on a snapshot of the dataset with the lock released, so chat
    /// and ticks keep flowing. Only one run at a time.
    pub fn train(&self) -> Result<TrainingSummary, SessionError> {
        let dataset = {
            let mut st = self.started()?;
            if st.training {
                return Err(SessionError::Busy);
            }
            let usable = st.dataset.non_empty_categories().count();
            if usable < 2 {
                return Err(ClassifierError::InsufficientCategories(usable).into());
            }
            st.training = true;
            st.dataset.clone()
        };
        let result = ClassifierModel::train(
            &dataset,
            self.extractor.as_ref(),
            self.config.hyperparams,
            self.now(),
        );
        let mut st = self.lock();
        st.training = false;
        let (model, summary) = result?;
        st.model = Some(model);
        let counts: Vec<String> = summary
            .labels
            .iter()
            .zip(&summary.samples_per_label)
            .map(|(l, n)| format!("'{l}': {n}"))
            .collect();
        let mut text = format!(
            "Trained a model on {} categories ({}); training accuracy {:.0}%.",
            summary.labels.len(),
            counts.join(", "),
            summary.training_accuracy * 100.0
        );
        if !summary.excluded_empty.is_empty() {
            text.push_str(&format!(
                " Empty categories left out: {}.",
                summary
                    .excluded_empty
                    .iter()
                    .map(|n| format!("'{n}'"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        let msg = self.log_event(&mut st, EventKind::Training, text);
        self.emit(&mut st, FrameKind::TrainingDone, &msg);
        self.autosave(&st)?;
        Ok(summary)
    }

    pub fn is_training(&self) -> bool {
        self.lock().training
    }

    pub fn infer(&self, image: &[u8]) -> Result<InferenceResult, SessionError> {
        let mut st = self.started()?;
        let model = st.model.as_ref().ok_or(SessionError::NoModel)?;
        let (decoded, _) =
            decode_image(image).map_err(|r| SessionError::Classifier(ClassifierError::UndecodableImage(r)))?;
        let prediction = model.predict(self.extractor.as_ref(), image)?;
        st.next_inference += 1;
        let result = InferenceResult {
            id: format!("inf-{:06}", st.next_inference),
            prediction,
            image_digest: sha256_hex(image),
            image_mime: decoded.kind.mime().to_string(),
            created_at: self.now(),
        };
        st.inferences.insert(
            result.id.clone(),
            StoredInference {
                result: result.clone(),
                image: Arc::new(image.to_vec()),
            },
        );
        let text = format!(
            "Evaluated a test image ({}): {}",
            result.id,
            serialize_inference_result(&result.prediction)
        );
        self.log_event(&mut st, EventKind::Inference, text);
        self.autosave(&st)?;
        Ok(result)
    }

    /// The montage of `category` as last sent to an agent, or a fresh one
    /// if none was sent yet.
    pub fn montage(&self, category: &str) -> Result<Montage, SessionError> {
        let st = self.lock();
        let cat = st
            .dataset
            .category(category)
            .ok_or_else(|| SessionError::UnknownCategory(category.to_string()))?;
        let seed = st
            .last_montage_seeds
            .get(category)
            .copied()
            .unwrap_or_else(|| mix64(st.rng_seed));
        Ok(render_montage(cat, &st.dataset, seed)?)
    }
}

fn seed_from_id(id: &str) -> u64 {
    let digest = sha256_hex(id.as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}
