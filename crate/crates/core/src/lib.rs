//! Core logic for an interactive machine-learning workbench.
//!
//! A user curates categories of images, trains a one-vs-rest linear SVM on
//! frozen image features and evaluates it, while two multimodal-LLM agents
//! share one dialogue history: a passive agent answering explicit requests and
//! an active agent that speaks up on a fixed interval when the user has been
//! doing something.
//!
//! The HTTP binding lives in the `workbench-server` crate; everything here is
//! transport-free so it can be driven directly from tests.

pub mod agents;
pub mod classifier;
pub mod clock;
pub mod dataset;
pub mod digest;
pub mod features;
pub mod mllm;
pub mod montage;
mod font;
pub mod prompts;
pub mod session;
pub mod store;

pub use agents::{
    spawn_active_scheduler, ActivityTracker, AgentToggle, DialogueHistory, Message, Role, TickOutcome,
};
pub use classifier::{ClassifierModel, Hyperparams, InferenceResult};
pub use clock::{Clock, ManualClock, SystemClock};
pub use dataset::{Category, ImageRef, TrainingDataset};
pub use features::{BuiltinExtractor, FeatureExtractor, FeatureVector};
pub use mllm::{AgentContext, AgentId, AuditLog, MockScript};
pub use montage::Montage;
pub use prompts::{PromptBindings, PromptEnvelope, TemplateId};
pub use session::{EventFrame, FrameKind, Session, SessionConfig, SessionDeps, SessionError};
