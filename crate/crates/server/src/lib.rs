//! HTTP service for the workbench: one JSON endpoint per user action, a
//! server-sent event stream per session for agent output, and on-disk
//! persistence of every session.

pub mod api;
pub mod error;
pub mod state;

pub use api::router;
pub use error::ApiError;
pub use state::{AppConfig, AppState};
