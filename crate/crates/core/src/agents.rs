//! The two agents and the dialogue history they share.
//!
//! The passive agent answers explicit requests (chat input, the two "Ask the
//! Assistant" buttons) and sees the whole conversation as a multi-turn
//! exchange. The active agent is woken on a fixed interval, sees the history
//! serialized into a single prompt, and is skipped when the user has done
//! nothing since the previous tick. Both append to the same history.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;
use tokio::time::{Instant, MissedTickBehavior};

use crate::clock::Millis;
use crate::mllm::{AgentContext, ChatMessage, ChatRequest, ChatRole, Completion, MllmError};
use crate::montage::{render_all, render_montage};
use crate::prompts::{
    render, serialize_chat_log, serialize_inference_result, truncate_chat_log, Attachment,
    PromptBindings, PromptEnvelope, TemplateId,
};
use crate::session::{FrameKind, Session, SessionError, SessionPhase, SessionState};

pub const OPENING_QUESTION: &str = "What kind of AI would you like to create?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    PassiveAgent,
    ActiveAgent,
    SystemEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AskButton,
    Dataset,
    Training,
    Inference,
    Toggle,
    Error,
}

/// What was sent to the model for a reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeRecord {
    pub template_id: TemplateId,
    pub envelope_digest: String,
    pub request_id: String,
    pub montage_seed: Option<u64>,
    pub attachment_digests: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub role: Role,
    pub text: String,
    pub timestamp: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<EventKind>,
    /// Names of the images that went out with the request this message made.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub related_envelope: Option<EnvelopeRecord>,
}

impl Message {
    pub fn is_error(&self) -> bool {
        self.event == Some(EventKind::Error)
    }

    #[cfg(test)]
    pub(crate) fn test(role: Role, text: &str, timestamp: Millis) -> Self {
        Self {
            seq: timestamp,
            role,
            text: text.to_string(),
            timestamp,
            event: None,
            attachments: Vec::new(),
            related_envelope: None,
        }
    }
}

/// Append-only, timestamps never go backwards.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    messages: Vec<Message>,
}

impl DialogueHistory {
    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Appends and returns a copy of the stored message. A clock reading
    /// older than the last entry is clamped to it.
    pub fn append(
        &mut self,
        role: Role,
        text: impl Into<String>,
        now: Millis,
        event: Option<EventKind>,
        attachments: Vec<String>,
        related_envelope: Option<EnvelopeRecord>,
    ) -> Message {
        let timestamp = self.messages.last().map_or(now, |m| m.timestamp.max(now));
        let msg = Message {
            seq: self.messages.len() as u64 + 1,
            role,
            text: text.into(),
            timestamp,
            event,
            attachments,
            related_envelope,
        };
        self.messages.push(msg.clone());
        msg
    }

    /// Prior conversation as chat turns for the passive agent. System events
    /// become bracketed user turns; error events are dropped.
    pub fn as_chat_turns(&self) -> Vec<ChatMessage> {
        self.messages
            .iter()
            .filter(|m| !m.is_error())
            .map(|m| match m.role {
                Role::User => ChatMessage::text(ChatRole::User, m.text.clone()),
                Role::PassiveAgent | Role::ActiveAgent => {
                    ChatMessage::text(ChatRole::Assistant, m.text.clone())
                }
                Role::SystemEvent => ChatMessage::text(ChatRole::User, format!("[event] {}", m.text)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityTracker {
    pub last_interaction_at: Option<Millis>,
    pub interactions_since_tick: u64,
}

impl ActivityTracker {
    pub fn record(&mut self, now: Millis) {
        self.last_interaction_at = Some(now);
        self.interactions_since_tick += 1;
    }

    /// Returns the count and resets it.
    pub fn take(&mut self) -> u64 {
        std::mem::take(&mut self.interactions_since_tick)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentToggle {
    pub active_enabled: bool,
}

impl Default for AgentToggle {
    fn default() -> Self {
        Self {
            active_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TickOutcome {
    /// Toggle is off; the counter was left alone.
    Disabled,
    /// No interactions since the last tick; nothing was sent.
    Skipped,
    Fired(Message),
    /// The request went out but failed; the message is the error event.
    Failed(Message),
}

impl TickOutcome {
    pub fn message(&self) -> Option<&Message> {
        match self {
            TickOutcome::Fired(m) => Some(m),
            _ => None,
        }
    }

    pub fn requested(&self) -> bool {
        matches!(self, TickOutcome::Fired(_) | TickOutcome::Failed(_))
    }
}

/// A request prepared under the session lock, sent after releasing it.
struct Pending {
    envelope: PromptEnvelope,
    request: ChatRequest,
}

fn record_for(pending: &Pending, completion: &Completion) -> EnvelopeRecord {
    EnvelopeRecord {
        template_id: pending.envelope.template_id,
        envelope_digest: pending.envelope.digest(),
        request_id: completion.audit.request_id.clone(),
        montage_seed: pending.envelope.montage_seed,
        attachment_digests: pending
            .envelope
            .attachments
            .iter()
            .map(|a| a.digest.clone())
            .collect(),
    }
}

impl Session {
    /// Puts the opening question into an empty history.
    pub fn start_session(&self) -> Result<Message, SessionError> {
        let mut st = self.lock();
        if st.phase != SessionPhase::New {
            return Err(SessionError::AlreadyStarted);
        }
        let now = self.now();
        let msg = st
            .history
            .append(Role::PassiveAgent, OPENING_QUESTION, now, None, vec![], None);
        st.phase = SessionPhase::AwaitingGoal;
        self.emit(&mut st, FrameKind::PassiveReply, &msg);
        self.autosave(&st)?;
        Ok(msg)
    }

    pub async fn handle_chat(&self, user_text: &str) -> Result<Message, SessionError> {
        let text = user_text.trim();
        if text.is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        let pending = {
            let mut st = self.lock();
            st.require_started()?;
            let prior = st.history.as_chat_turns();
            let bindings = self.bindings().with_user_input(text);
            let (template, attachments, seed) = if st.dataset.has_training_data() {
                let seed = st.next_prompt_seed();
                let montages = render_all(&st.dataset, seed)?;
                st.remember_montage_seeds(&montages);
                let atts = montages.iter().map(Attachment::from_montage).collect();
                (TemplateId::PassiveChatWithData, atts, Some(seed))
            } else {
                (TemplateId::PassiveChatNoData, Vec::new(), None)
            };
            let mut envelope = render(template, bindings, attachments)?;
            envelope.montage_seed = seed;
            let now = self.now();
            st.history
                .append(Role::User, text, now, None, envelope.attachment_names(), None);
            st.activity.record(now);
            if st.phase == SessionPhase::AwaitingGoal {
                st.phase = SessionPhase::Active;
            }
            self.autosave(&st)?;
            let request = ChatRequest::passive(&envelope, prior);
            Pending { envelope, request }
        };
        self.send_passive(pending).await
    }

    pub async fn handle_ask_category(&self, category_name: &str) -> Result<Message, SessionError> {
        let pending = {
            let mut st = self.lock();
            st.require_started()?;
            let category = st
                .dataset
                .category(category_name)
                .cloned()
                .ok_or_else(|| SessionError::UnknownCategory(category_name.to_string()))?;
            if category.is_empty() {
                return Err(SessionError::EmptyCategory(category_name.to_string()));
            }
            let seed = st.next_prompt_seed();
            let montage = render_montage(&category, &st.dataset, seed)?;
            st.remember_montage_seeds(std::slice::from_ref(&montage));
            let mut envelope = render(
                TemplateId::PassiveAskCategory,
                self.bindings().with_category(category_name),
                vec![Attachment::from_montage(&montage)],
            )?;
            envelope.montage_seed = Some(seed);
            let now = self.now();
            st.history.append(
                Role::SystemEvent,
                format!("Asked the assistant about the category '{category_name}'."),
                now,
                Some(EventKind::AskButton),
                envelope.attachment_names(),
                None,
            );
            st.activity.record(now);
            self.autosave(&st)?;
            let prior = st.history.as_chat_turns();
            // the button event itself is replaced by the rendered prompt
            let prior = prior[..prior.len() - 1].to_vec();
            let request = ChatRequest::passive(&envelope, prior);
            Pending { envelope, request }
        };
        self.send_passive(pending).await
    }

    pub async fn handle_ask_inference(&self, inference_id: &str) -> Result<Message, SessionError> {
        let pending = {
            let mut st = self.lock();
            st.require_started()?;
            let stored = st
                .inferences
                .get(inference_id)
                .ok_or_else(|| SessionError::UnknownInference(inference_id.to_string()))?;
            let serialized = serialize_inference_result(&stored.result.prediction);
            let attachment = Attachment::new(
                "test image",
                stored.result.image_mime.clone(),
                stored.image.clone(),
            );
            let envelope = render(
                TemplateId::PassiveAskInference,
                self.bindings().with_inference_result(serialized.clone()),
                vec![attachment],
            )?;
            let now = self.now();
            st.history.append(
                Role::SystemEvent,
                format!("Asked the assistant about inference result {inference_id}: {serialized}"),
                now,
                Some(EventKind::AskButton),
                envelope.attachment_names(),
                None,
            );
            st.activity.record(now);
            self.autosave(&st)?;
            let prior = st.history.as_chat_turns();
            let prior = prior[..prior.len() - 1].to_vec();
            let request = ChatRequest::passive(&envelope, prior);
            Pending { envelope, request }
        };
        self.send_passive(pending).await
    }

    async fn send_passive(&self, pending: Pending) -> Result<Message, SessionError> {
        let result = self.passive_context().complete(&pending.request).await;
        self.finish(pending, result, Role::PassiveAgent, FrameKind::PassiveReply)
    }

    fn finish(
        &self,
        pending: Pending,
        result: Result<Completion, MllmError>,
        role: Role,
        frame: FrameKind,
    ) -> Result<Message, SessionError> {
        let mut st = self.lock();
        let now = self.now();
        match result {
            Ok(completion) => {
                let record = record_for(&pending, &completion);
                let msg = st
                    .history
                    .append(role, completion.text, now, None, vec![], Some(record));
                self.emit(&mut st, frame, &msg);
                self.autosave(&st)?;
                Ok(msg)
            }
            Err(e) => {
                let agent = if role == Role::ActiveAgent { "active" } else { "passive" };
                let msg = st.history.append(
                    Role::SystemEvent,
                    format!("The {agent} agent could not answer: {e}"),
                    now,
                    Some(EventKind::Error),
                    vec![],
                    None,
                );
                self.emit(&mut st, FrameKind::ErrorEvent, &msg);
                self.autosave(&st)?;
                Err(SessionError::AgentBackendFailure(e))
            }
        }
    }

    /// One scheduler tick: fire iff the toggle is on and the user did
    /// something since the previous tick.
    pub async fn tick_active(&self) -> Result<TickOutcome, SessionError> {
        let pending = {
            let mut st = self.lock();
            st.require_started()?;
            if !st.toggle.active_enabled {
                return Ok(TickOutcome::Disabled);
            }
            if st.activity.take() == 0 {
                self.autosave(&st)?;
                return Ok(TickOutcome::Skipped);
            }
            let chat_log = truncate_chat_log(
                &serialize_chat_log(st.history.messages()),
                self.config().chat_log_max_chars,
            );
            let bindings = self.bindings().with_chat_log(chat_log);
            let envelope = if st.dataset.has_training_data() {
                let seed = st.next_prompt_seed();
                let montages = render_all(&st.dataset, seed)?;
                st.remember_montage_seeds(&montages);
                let atts = montages.iter().map(Attachment::from_montage).collect();
                let mut env = render(TemplateId::ActiveWithData, bindings, atts)?;
                env.montage_seed = Some(seed);
                env
            } else {
                render(TemplateId::ActiveNoData, bindings, Vec::new())?
            };
            self.autosave(&st)?;
            let request = ChatRequest::active(&envelope);
            Pending { envelope, request }
        };
        let result = self.active_context().complete(&pending.request).await;
        match self.finish(pending, result, Role::ActiveAgent, FrameKind::ActiveAdvice) {
            Ok(msg) => Ok(TickOutcome::Fired(msg)),
            Err(SessionError::AgentBackendFailure(_)) => {
                let st = self.lock();
                let last = st.history.messages().last().cloned().expect("error event appended");
                Ok(TickOutcome::Failed(last))
            }
            Err(e) => Err(e),
        }
    }

    /// Turns the proactive agent on or off. Setting the current value again
    /// changes nothing and logs nothing.
    pub fn set_active_toggle(&self, enabled: bool) -> Result<(), SessionError> {
        let mut st = self.lock();
        st.require_started()?;
        if st.toggle.active_enabled == enabled {
            return Ok(());
        }
        st.toggle.active_enabled = enabled;
        let now = self.now();
        let text = if enabled {
            "The active agent was turned on."
        } else {
            "The active agent was turned off."
        };
        st.history
            .append(Role::SystemEvent, text, now, Some(EventKind::Toggle), vec![], None);
        self.autosave(&st)?;
        Ok(())
    }

    fn bindings(&self) -> PromptBindings {
        PromptBindings::new(self.config().language.clone())
    }

    fn passive_context(&self) -> &AgentContext {
        &self.agents().0
    }

    fn active_context(&self) -> &AgentContext {
        &self.agents().1
    }
}

/// Ticks the active agent of `session` every `interval` until aborted.
///
/// Ticks run one at a time; a tick that comes due while the previous
/// request is still in flight is dropped rather than queued.
pub fn spawn_active_scheduler(session: Arc<Session>, interval: Duration) -> JoinHandle<()> {
    tokio::spawn(async move {
        let mut timer = tokio::time::interval_at(Instant::now() + interval, interval);
        timer.set_missed_tick_behavior(MissedTickBehavior::Skip);
        loop {
            timer.tick().await;
            match session.tick_active().await {
                Ok(outcome) => tracing::debug!(
                    session = session.id(),
                    fired = outcome.requested(),
                    "active tick"
                ),
                Err(SessionError::NotStarted) => {}
                Err(e) => tracing::warn!(session = session.id(), error = %e, "active tick failed"),
            }
        }
    })
}

impl SessionState {
    fn require_started(&self) -> Result<(), SessionError> {
        if self.phase == SessionPhase::New {
            Err(SessionError::NotStarted)
        } else {
            Ok(())
        }
    }
}
