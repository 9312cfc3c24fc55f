use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use tokio::task::JoinHandle;
use workbench_core::digest::sha256_hex;
use workbench_core::mllm::{AuditLog, Backend};
use workbench_core::{
    spawn_active_scheduler, AgentContext, AgentId, BuiltinExtractor, Clock, FeatureExtractor,
    Session, SessionConfig, SessionDeps, SessionError, SystemClock,
};

pub const SESSIONS_DIR: &str = "sessions";
pub const AUDIT_FILE: &str = "audit.jsonl";

pub struct AppConfig {
    /// Sessions are kept in memory only when unset.
    pub data_dir: Option<PathBuf>,
    pub session: SessionConfig,
    pub backend: Backend,
    pub extractor: Arc<dyn FeatureExtractor>,
    pub clock: Arc<dyn Clock>,
    /// Run the interval task that ticks each session's active agent.
    pub scheduler: bool,
}

impl AppConfig {
    pub fn new(backend: Backend) -> Self {
        Self {
            data_dir: None,
            session: SessionConfig::default(),
            backend,
            extractor: Arc::new(BuiltinExtractor::new()),
            clock: Arc::new(SystemClock),
            scheduler: true,
        }
    }
}

struct SessionEntry {
    session: Arc<Session>,
    scheduler: Option<JoinHandle<()>>,
}

impl Drop for SessionEntry {
    fn drop(&mut self) {
        if let Some(task) = self.scheduler.take() {
            task.abort();
        }
    }
}

pub struct AppState {
    config: AppConfig,
    sessions: RwLock<HashMap<String, SessionEntry>>,
    created: AtomicU64,
}

impl AppState {
    /// Loads every stored session. Must be called inside a Tokio runtime
    /// when the scheduler is enabled.
    pub fn new(config: AppConfig) -> Arc<Self> {
        let state = Arc::new(Self {
            config,
            sessions: RwLock::new(HashMap::new()),
            created: AtomicU64::new(0),
        });
        state.load_stored();
        state
    }

    pub fn config(&self) -> &AppConfig {
        &self.config
    }

    fn sessions_root(&self) -> Option<PathBuf> {
        self.config.data_dir.as_ref().map(|d| d.join(SESSIONS_DIR))
    }

    fn deps(&self, audit: Arc<AuditLog>) -> SessionDeps {
        let backend = self.config.backend.clone();
        SessionDeps {
            clock: self.config.clock.clone(),
            extractor: self.config.extractor.clone(),
            passive: AgentContext::new(AgentId::Passive, backend.clone(), audit.clone()),
            active: AgentContext::new(AgentId::Active, backend, audit),
        }
    }

    fn audit_for(&self, dir: Option<&PathBuf>) -> Arc<AuditLog> {
        match dir {
            Some(d) => AuditLog::with_file(&d.join(AUDIT_FILE)).unwrap_or_else(|e| {
                tracing::warn!(error = %e, "audit file unavailable, keeping records in memory");
                AuditLog::in_memory()
            }),
            None => AuditLog::in_memory(),
        }
    }

    fn load_stored(&self) {
        let Some(root) = self.sessions_root() else {
            return;
        };
        let Ok(entries) = std::fs::read_dir(&root) else {
            return;
        };
        for entry in entries.flatten() {
            let dir = entry.path();
            if !dir.is_dir() {
                continue;
            }
            let audit = self.audit_for(Some(&dir));
            match Session::load(&dir, self.config.session.clone(), self.deps(audit)) {
                Ok(session) => {
                    tracing::info!(session = session.id(), "session loaded");
                    self.insert(Arc::new(session));
                }
                Err(e) => tracing::error!(dir = %dir.display(), error = %e, "session not loaded"),
            }
        }
    }

    fn insert(&self, session: Arc<Session>) {
        let scheduler = self
            .config
            .scheduler
            .then(|| spawn_active_scheduler(session.clone(), self.config.session.active_interval));
        let entry = SessionEntry {
            session: session.clone(),
            scheduler,
        };
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(session.id().to_string(), entry);
    }

    fn new_id(&self) -> String {
        let n = self.created.fetch_add(1, Ordering::Relaxed);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default();
        let digest = sha256_hex(format!("{nanos}:{n}:{}", std::process::id()).as_bytes());
        format!("s-{}", &digest[..16])
    }

    /// Creates, stores and starts a new session.
    pub fn create_session(&self) -> Result<Arc<Session>, SessionError> {
        let id = self.new_id();
        let dir = self.sessions_root().map(|r| r.join(&id));
        let audit = self.audit_for(dir.as_ref());
        let mut session = Session::new(&id, self.config.session.clone(), self.deps(audit));
        if let Some(dir) = dir {
            session = session.with_storage(dir)?;
        }
        session.start_session()?;
        let session = Arc::new(session);
        self.insert(session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .map(|e| e.session.clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .sessions
            .read()
            .expect("session table poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        ids
    }
}
