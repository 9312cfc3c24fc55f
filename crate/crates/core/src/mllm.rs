//! Transport to a chat-completions style multimodal model.
//!
//! Each agent owns an [`AgentContext`]: its own HTTP client, its own request
//! counter and its own in-flight guard, so the passive and active agents can
//! talk to the model at the same time without sharing connection state. The
//! [`MockScript`] backend answers from canned rules for offline runs.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::prompts::{Attachment, PromptEnvelope, TemplateId};

/// 10 category montages plus one evaluated image.
pub const MAX_ATTACHMENTS: usize = 11;
pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 20 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentId {
    Passive,
    Active,
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentId::Passive => "passive",
            AgentId::Active => "active",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MllmError {
    #[error("model request timed out after {0:?}")]
    Timeout(Duration),
    #[error("model endpoint answered HTTP {0}")]
    HttpError(u16),
    #[error("request payload too large: {0}")]
    PayloadTooLarge(String),
    #[error("model endpoint rejected the credentials")]
    AuthFailure,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    BadResponse(String),
}

impl MllmError {
    fn retryable(&self) -> bool {
        match self {
            MllmError::Timeout(_) | MllmError::Transport(_) => true,
            MllmError::HttpError(status) => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub text: String,
    pub attachments: Vec<Attachment>,
}

impl ChatMessage {
    pub fn text(role: ChatRole, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
            attachments: Vec::new(),
        }
    }
}

/// One logical call: the message list plus what produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub template_id: TemplateId,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    /// Passive agent: system prompt, prior turns, then the rendered prompt
    /// (with its images) as the latest user turn.
    pub fn passive(envelope: &PromptEnvelope, prior_turns: Vec<ChatMessage>) -> Self {
        let mut messages = Vec::with_capacity(prior_turns.len() + 2);
        if let Some(system) = &envelope.system_text {
            messages.push(ChatMessage::text(ChatRole::System, system.clone()));
        }
        messages.extend(prior_turns);
        messages.push(ChatMessage {
            role: ChatRole::User,
            text: envelope.user_text.clone(),
            attachments: envelope.attachments.clone(),
        });
        Self {
            template_id: envelope.template_id,
            messages,
        }
    }

    /// Active agent: exactly one user message.
    pub fn active(envelope: &PromptEnvelope) -> Self {
        Self {
            template_id: envelope.template_id,
            messages: vec![ChatMessage {
                role: ChatRole::User,
                text: envelope.user_text.clone(),
                attachments: envelope.attachments.clone(),
            }],
        }
    }

    /// Text of the final user message; the mock matches against this.
    pub fn latest_user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map_or("", |m| m.text.as_str())
    }

    pub fn attachment_count(&self) -> usize {
        self.messages.iter().map(|m| m.attachments.len()).sum()
    }

    fn payload_bytes(&self) -> usize {
        self.messages
            .iter()
            .map(|m| m.text.len() + m.attachments.iter().map(|a| a.bytes.len()).sum::<usize>())
            .sum()
    }

    /// The JSON body sent to a chat-completions endpoint. Images become
    /// base64 data URLs after the message text, in attachment order.
    pub fn wire_body(&self, model: &str, temperature: Option<f64>) -> serde_json::Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let messages: Vec<_> = self
            .messages
            .iter()
            .map(|m| {
                if m.attachments.is_empty() && m.role != ChatRole::User {
                    return json!({ "role": m.role, "content": m.text });
                }
                let mut parts = vec![json!({ "type": "text", "text": m.text })];
                parts.extend(m.attachments.iter().map(|a| {
                    json!({
                        "type": "image_url",
                        "image_url": { "url": format!("data:{};base64,{}", a.mime, b64.encode(a.bytes.as_slice())) }
                    })
                }));
                json!({ "role": m.role, "content": parts })
            })
            .collect();
        let mut body = json!({ "model": model, "messages": messages });
        if let Some(t) = temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring looked for in the latest user message.
    pub contains: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentId>,
    #[serde(default)]
    pub reply: String,
    /// Answer with this HTTP status instead of a reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_status: Option<u16>,
}

/// Canned replies; the first matching rule wins.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub fallback: String,
    /// Simulated service time per call.
    #[serde(default)]
    pub latency_ms: u64,
}

impl MockScript {
    pub fn new(fallback: impl Into<String>) -> Self {
        Self {
            fallback: fallback.into(),
            ..Self::default()
        }
    }

    pub fn rule(mut self, contains: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            contains: contains.into(),
            agent: None,
            reply: reply.into(),
            fail_status: None,
        });
        self
    }

    pub fn agent_rule(
        mut self,
        agent: AgentId,
        contains: impl Into<String>,
        reply: impl Into<String>,
    ) -> Self {
        self.rules.push(MockRule {
            contains: contains.into(),
            agent: Some(agent),
            reply: reply.into(),
            fail_status: None,
        });
        self
    }

    pub fn failing_rule(mut self, contains: impl Into<String>, status: u16) -> Self {
        self.rules.push(MockRule {
            contains: contains.into(),
            agent: None,
            reply: String::new(),
            fail_status: Some(status),
        });
        self
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn respond(&self, agent: AgentId, text: &str) -> Result<String, MllmError> {
        let hit = self
            .rules
            .iter()
            .find(|r| r.agent.is_none_or(|a| a == agent) && text.contains(&r.contains));
        match hit {
            Some(MockRule {
                fail_status: Some(status),
                ..
            }) => Err(MllmError::HttpError(*status)),
            Some(rule) => Ok(rule.reply.clone()),
            None => Ok(self.fallback.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Base URL; `/chat/completions` and `/models` are appended.
    pub endpoint: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    pub temperature: Option<f64>,
    pub max_payload_bytes: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".to_string(),
            model: "gpt-4o-2024-05-13".to_string(),
            api_key: None,
            timeout: Duration::from_secs(60),
            retries: 0,
            temperature: None,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Mock(Arc<MockScript>),
    Http(ClientConfig),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub request_id: String,
    pub agent_id: AgentId,
    pub template_id: TemplateId,
    pub request_digest: String,
    /// Images sent with the request.
    pub attachments: usize,
    pub response_digest: Option<String>,
    pub latency_ms: u64,
    pub outcome: String,
}

/// Append-only audit trail shared by both contexts of a session.
#[derive(Debug, Default)]
pub struct AuditLog {
    records: Mutex<Vec<AuditRecord>>,
    sink: Option<Mutex<std::fs::File>>,
}

impl AuditLog {
    pub fn in_memory() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Also appends each record as a JSON line to `path`.
    pub fn with_file(path: &Path) -> std::io::Result<Arc<Self>> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Arc::new(Self {
            records: Mutex::new(Vec::new()),
            sink: Some(Mutex::new(file)),
        }))
    }

    fn push(&self, record: AuditRecord) {
        if let Some(sink) = &self.sink {
            use std::io::Write as _;
            let mut file = sink.lock().expect("audit sink poisoned");
            if let Ok(line) = serde_json::to_string(&record) {
                if let Err(e) = writeln!(file, "{line}") {
                    tracing::warn!(error = %e, "audit log write failed");
                }
            }
        }
        self.records.lock().expect("audit log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().expect("audit log poisoned").clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HealthStatus {
    pub reachable: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub audit: AuditRecord,
}

/// Per-agent client state. Nothing in here is shared with the other agent.
#[derive(Debug)]
pub struct AgentContext {
    agent: AgentId,
    backend: Backend,
    timeout: Duration,
    retries: u32,
    max_payload_bytes: usize,
    http: reqwest::Client,
    in_flight: tokio::sync::Mutex<()>,
    next_request: AtomicU64,
    network_requests: AtomicU64,
    audit: Arc<AuditLog>,
}

impl AgentContext {
    pub fn new(agent: AgentId, backend: Backend, audit: Arc<AuditLog>) -> Self {
        let (timeout, retries, max_payload_bytes) = match &backend {
            Backend::Http(cfg) => (cfg.timeout, cfg.retries, cfg.max_payload_bytes),
            Backend::Mock(_) => (
                ClientConfig::default().timeout,
                0,
                DEFAULT_MAX_PAYLOAD_BYTES,
            ),
        };
        Self {
            agent,
            backend,
            timeout,
            retries,
            max_payload_bytes,
            http: reqwest::Client::new(),
            in_flight: tokio::sync::Mutex::new(()),
            next_request: AtomicU64::new(0),
            network_requests: AtomicU64::new(0),
            audit,
        }
    }

    pub fn mock(agent: AgentId, script: MockScript, audit: Arc<AuditLog>) -> Self {
        Self::new(agent, Backend::Mock(Arc::new(script)), audit)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn agent(&self) -> AgentId {
        self.agent
    }

    pub fn audit_log(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    /// Number of backend calls actually issued, retries included.
    pub fn requests_issued(&self) -> u64 {
        self.network_requests.load(Ordering::SeqCst)
    }

    fn model_name(&self) -> &str {
        match &self.backend {
            Backend::Http(cfg) => &cfg.model,
            Backend::Mock(_) => "mock",
        }
    }

    fn temperature(&self) -> Option<f64> {
        match &self.backend {
            Backend::Http(cfg) => cfg.temperature,
            Backend::Mock(_) => None,
        }
    }

    /// Sends one logical request and waits for the whole reply.
    pub async fn complete(&self, request: &ChatRequest) -> Result<Completion, MllmError> {
        if request.attachment_count() > MAX_ATTACHMENTS {
            return Err(MllmError::PayloadTooLarge(format!(
                "{} attachments (max {MAX_ATTACHMENTS})",
                request.attachment_count()
            )));
        }
        if request.payload_bytes() > self.max_payload_bytes {
            return Err(MllmError::PayloadTooLarge(format!(
                "{} bytes (max {})",
                request.payload_bytes(),
                self.max_payload_bytes
            )));
        }
        let body = request.wire_body(self.model_name(), self.temperature());
        let body_bytes = serde_json::to_vec(&body).expect("JSON values always serialize");
        let request_digest = sha256_hex(&body_bytes);
        let n = self.next_request.fetch_add(1, Ordering::SeqCst) + 1;
        let request_id = format!("{}-{n:06}", self.agent);

        let _guard = self.in_flight.lock().await;
        let started = Instant::now();
        let mut attempt = 0;
        let result = loop {
            self.network_requests.fetch_add(1, Ordering::SeqCst);
            let r = match tokio::time::timeout(self.timeout, self.send(request, &body_bytes)).await {
                Ok(r) => r,
                Err(_) => Err(MllmError::Timeout(self.timeout)),
            };
            match r {
                Err(e) if e.retryable() && attempt < self.retries => attempt += 1,
                other => break other,
            }
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let audit = AuditRecord {
            request_id,
            agent_id: self.agent,
            template_id: request.template_id,
            request_digest,
            attachments: request.attachment_count(),
            response_digest: result.as_ref().ok().map(|t| sha256_hex(t.as_bytes())),
            latency_ms,
            outcome: match &result {
                Ok(_) => "ok".to_string(),
                Err(e) => e.to_string(),
            },
        };
        self.audit.push(audit.clone());
        result.map(|text| Completion { text, audit })
    }

    async fn send(&self, request: &ChatRequest, body: &[u8]) -> Result<String, MllmError> {
        match &self.backend {
            Backend::Mock(script) => {
                if script.latency_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(script.latency_ms)).await;
                }
                script.respond(self.agent, request.latest_user_text())
            }
            Backend::Http(cfg) => {
                let url = format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/'));
                let mut req = self
                    .http
                    .post(url)
                    .header(reqwest::header::CONTENT_TYPE, "application/json")
                    .body(body.to_vec());
                if let Some(key) = &cfg.api_key {
                    req = req.bearer_auth(key);
                }
                let resp = req.send().await.map_err(|e| {
                    if e.is_timeout() {
                        MllmError::Timeout(self.timeout)
                    } else {
                        MllmError::Transport(e.to_string())
                    }
                })?;
                let status = resp.status().as_u16();
                if status == 401 || status == 403 {
                    return Err(MllmError::AuthFailure);
                }
                if status == 413 {
                    return Err(MllmError::PayloadTooLarge("rejected by endpoint".into()));
                }
                if !resp.status().is_success() {
                    return Err(MllmError::HttpError(status));
                }
                let value: serde_json::Value = resp
                    .json()
                    .await
                    .map_err(|e| MllmError::BadResponse(e.to_string()))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| MllmError::BadResponse("no choices[0].message.content".into()))
            }
        }
    }

    /// Probes the backend without spending model quota. Never errors.
    pub async fn healthcheck(&self) -> HealthStatus {
        match &self.backend {
            Backend::Mock(_) => HealthStatus {
                reachable: true,
                detail: "mock backend".to_string(),
            },
            Backend::Http(cfg) => {
                let url = format!("{}/models", cfg.endpoint.trim_end_matches('/'));
                let mut req = self.http.get(url);
                if let Some(key) = &cfg.api_key {
                    req = req.bearer_auth(key);
                }
                match tokio::time::timeout(self.timeout, req.send()).await {
                    Ok(Ok(resp)) => HealthStatus {
                        reachable: true,
                        detail: format!("HTTP {}", resp.status().as_u16()),
                    },
                    Ok(Err(e)) => HealthStatus {
                        reachable: false,
                        detail: e.to_string(),
                    },
                    Err(_) => HealthStatus {
                        reachable: false,
                        detail: format!("no answer within {:?}", self.timeout),
                    },
                }
            }
        }
    }
}
