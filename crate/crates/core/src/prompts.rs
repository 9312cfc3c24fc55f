//! Prompt assembly.
//!
//! Seven embedded templates cover every request the agents receive: the
//! passive agent's system prompt, its four user-prompt variants, and the
//! active agent's two user-prompt variants. Placeholders are written
//! `{{name}}` and substituted verbatim in a single pass.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Message, Role};
use crate::classifier::Prediction;
use crate::digest::{sha256_hex, sha256_parts};
use crate::montage::Montage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PassiveSystem,
    PassiveChatNoData,
    PassiveChatWithData,
    PassiveAskCategory,
    PassiveAskInference,
    ActiveWithData,
    ActiveNoData,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::PassiveSystem,
        TemplateId::PassiveChatNoData,
        TemplateId::PassiveChatWithData,
        TemplateId::PassiveAskCategory,
        TemplateId::PassiveAskInference,
        TemplateId::ActiveWithData,
        TemplateId::ActiveNoData,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::PassiveSystem => "passive_system",
            TemplateId::PassiveChatNoData => "passive_chat_no_data",
            TemplateId::PassiveChatWithData => "passive_chat_with_data",
            TemplateId::PassiveAskCategory => "passive_ask_category",
            TemplateId::PassiveAskInference => "passive_ask_inference",
            TemplateId::ActiveWithData => "active_with_data",
            TemplateId::ActiveNoData => "active_no_data",
        }
    }

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::PassiveSystem => include_str!("../templates/passive_system.txt"),
            TemplateId::PassiveChatNoData => include_str!("../templates/passive_chat_no_data.txt"),
            TemplateId::PassiveChatWithData => {
                include_str!("../templates/passive_chat_with_data.txt")
            }
            TemplateId::PassiveAskCategory => include_str!("../templates/passive_ask_category.txt"),
            TemplateId::PassiveAskInference => {
                include_str!("../templates/passive_ask_inference.txt")
            }
            TemplateId::ActiveWithData => include_str!("../templates/active_with_data.txt"),
            TemplateId::ActiveNoData => include_str!("../templates/active_no_data.txt"),
        }
    }

    pub fn is_passive(self) -> bool {
        !matches!(self, TemplateId::ActiveWithData | TemplateId::ActiveNoData)
    }

    /// Exact number of attachments the variant requires; `None` means
    /// one or more.
    fn attachment_rule(self) -> AttachmentRule {
        match self {
            TemplateId::PassiveSystem | TemplateId::PassiveChatNoData | TemplateId::ActiveNoData => {
                AttachmentRule::None
            }
            TemplateId::PassiveAskCategory | TemplateId::PassiveAskInference => {
                AttachmentRule::Exactly(1)
            }
            TemplateId::PassiveChatWithData | TemplateId::ActiveWithData => AttachmentRule::AtLeastOne,
        }
    }

    pub fn placeholders(self) -> BTreeSet<Placeholder> {
        parse_placeholders(self.body()).expect("embedded templates are well-formed")
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

enum AttachmentRule {
    None,
    Exactly(usize),
    AtLeastOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    UserSelectedLanguage,
    UserInput,
    UserDefinedCategoryName,
    InferenceResult,
    ChatLog,
}

impl Placeholder {
    pub const ALL: [Placeholder; 5] = [
        Placeholder::UserSelectedLanguage,
        Placeholder::UserInput,
        Placeholder::UserDefinedCategoryName,
        Placeholder::InferenceResult,
        Placeholder::ChatLog,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Placeholder::UserSelectedLanguage => "user_selected_language",
            Placeholder::UserInput => "user_input",
            Placeholder::UserDefinedCategoryName => "user_defined_category_name",
            Placeholder::InferenceResult => "inference_result",
            Placeholder::ChatLog => "chat_log",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Placeholder::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template needs a value for {0}")]
    MissingBinding(&'static str),
    #[error("value for {0} is bound but not used by the template")]
    UnexpectedBinding(&'static str),
    #[error("template {0} does not take attachments")]
    UnexpectedAttachment(TemplateId),
    #[error("template {template} expects {expected} attachment(s), got {got}")]
    AttachmentCount {
        template: TemplateId,
        expected: &'static str,
        got: usize,
    },
    #[error("{0} is a system prompt and cannot be the user turn")]
    SystemTemplateAsUserTurn(TemplateId),
    #[error("malformed placeholder in template: {0}")]
    Malformed(String),
}

/// Finds every `{{name}}` in `body`.
pub fn parse_placeholders(body: &str) -> Result<BTreeSet<Placeholder>, PromptError> {
    let mut found = BTreeSet::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::Malformed(after.chars().take(20).collect()))?;
        let name = &after[..end];
        found.insert(Placeholder::parse(name).ok_or_else(|| PromptError::Malformed(name.to_string()))?);
        rest = &after[end + 2..];
    }
    Ok(found)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBindings {
    pub user_selected_language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_defined_category_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_result: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chat_log: Option<String>,
}

impl PromptBindings {
    pub fn new(language: impl Into<String>) -> Self {
        Self {
            user_selected_language: language.into(),
            ..Self::default()
        }
    }

    pub fn with_user_input(mut self, v: impl Into<String>) -> Self {
        self.user_input = Some(v.into());
        self
    }

    pub fn with_category(mut self, v: impl Into<String>) -> Self {
        self.user_defined_category_name = Some(v.into());
        self
    }

    pub fn with_inference_result(mut self, v: impl Into<String>) -> Self {
        self.inference_result = Some(v.into());
        self
    }

    pub fn with_chat_log(mut self, v: impl Into<String>) -> Self {
        self.chat_log = Some(v.into());
        self
    }

    fn get(&self, p: Placeholder) -> Option<&str> {
        match p {
            Placeholder::UserSelectedLanguage => Some(self.user_selected_language.as_str()),
            Placeholder::UserInput => self.user_input.as_deref(),
            Placeholder::UserDefinedCategoryName => self.user_defined_category_name.as_deref(),
            Placeholder::InferenceResult => self.inference_result.as_deref(),
            Placeholder::ChatLog => self.chat_log.as_deref(),
        }
    }
}

/// Substitutes placeholders in one pass; values are never re-scanned.
pub fn fill(body: &str, bindings: &PromptBindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| PromptError::Malformed(after.chars().take(20).collect()))?;
        let p = Placeholder::parse(&after[..end])
            .ok_or_else(|| PromptError::Malformed(after[..end].to_string()))?;
        out.push_str(bindings.get(p).ok_or(PromptError::MissingBinding(p.as_str()))?);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// An image attached to a request, in envelope order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attachment {
    /// Category name for montages, `"test image"` for an evaluated image.
    pub name: String,
    pub mime: String,
    #[serde(skip)]
    pub bytes: Arc<Vec<u8>>,
    pub digest: String,
}

impl Attachment {
    pub fn new(name: impl Into<String>, mime: impl Into<String>, bytes: Arc<Vec<u8>>) -> Self {
        let digest = sha256_hex(&bytes);
        Self {
            name: name.into(),
            mime: mime.into(),
            bytes,
            digest,
        }
    }

    pub fn from_montage(m: &Montage) -> Self {
        Self {
            name: m.category_name.clone(),
            mime: "image/png".to_string(),
            bytes: Arc::clone(&m.png),
            digest: m.digest.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptEnvelope {
    pub template_id: TemplateId,
    pub system_text: Option<String>,
    pub user_text: String,
    pub attachments: Vec<Attachment>,
    pub bindings: PromptBindings,
    pub montage_seed: Option<u64>,
}

impl PromptEnvelope {
    pub fn digest(&self) -> String {
        let mut parts: Vec<&[u8]> = vec![
            self.template_id.as_str().as_bytes(),
            self.system_text.as_deref().unwrap_or("").as_bytes(),
            self.user_text.as_bytes(),
        ];
        parts.extend(self.attachments.iter().map(|a| a.digest.as_bytes()));
        sha256_parts(parts)
    }

    pub fn attachment_names(&self) -> Vec<String> {
        self.attachments.iter().map(|a| a.name.clone()).collect()
    }
}

/// Builds the envelope for one request.
///
/// Passive variants also get the passive system prompt. The bound values
/// must cover exactly the placeholders the envelope uses.
pub fn render(
    template_id: TemplateId,
    bindings: PromptBindings,
    attachments: Vec<Attachment>,
) -> Result<PromptEnvelope, PromptError> {
    if template_id == TemplateId::PassiveSystem {
        return Err(PromptError::SystemTemplateAsUserTurn(template_id));
    }
    let mut used = template_id.placeholders();
    if template_id.is_passive() {
        used.extend(TemplateId::PassiveSystem.placeholders());
    }
    for p in Placeholder::ALL {
        let bound = p == Placeholder::UserSelectedLanguage || bindings.get(p).is_some();
        match (used.contains(&p), bound) {
            (true, false) => return Err(PromptError::MissingBinding(p.as_str())),
            (false, true) if p != Placeholder::UserSelectedLanguage => {
                return Err(PromptError::UnexpectedBinding(p.as_str()))
            }
            _ => {}
        }
    }
    match template_id.attachment_rule() {
        AttachmentRule::None if !attachments.is_empty() => {
            return Err(PromptError::UnexpectedAttachment(template_id))
        }
        AttachmentRule::Exactly(n) if attachments.len() != n => {
            return Err(PromptError::AttachmentCount {
                template: template_id,
                expected: "exactly 1",
                got: attachments.len(),
            })
        }
        AttachmentRule::AtLeastOne if attachments.is_empty() => {
            return Err(PromptError::AttachmentCount {
                template: template_id,
                expected: "at least 1",
                got: 0,
            })
        }
        _ => {}
    }
    let system_text = if template_id.is_passive() {
        Some(fill(TemplateId::PassiveSystem.body(), &bindings)?)
    } else {
        None
    };
    let user_text = fill(template_id.body(), &bindings)?;
    Ok(PromptEnvelope {
        template_id,
        system_text,
        user_text,
        attachments,
        bindings,
        montage_seed: None,
    })
}

/// `{'dog': 30%, 'cat': 20%, 'bird': 50%}` in model label order.
pub fn serialize_inference_result(prediction: &Prediction) -> String {
    let body = prediction
        .labels
        .iter()
        .zip(&prediction.percentages)
        .map(|(label, pct)| format!("'{label}': {pct}%"))
        .collect::<Vec<_>>()
        .join(", ");
    format!("{{{body}}}")
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One line per message, `ROLE: text`, in timestamp order. Error events are
/// left out; attached montages are named, never inlined.
pub fn serialize_chat_log(history: &[Message]) -> String {
    let mut ordered: Vec<&Message> = history.iter().filter(|m| !m.is_error()).collect();
    ordered.sort_by_key(|m| m.timestamp);
    ordered
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::User => "USER",
                Role::PassiveAgent => "ASSISTANT (passive)",
                Role::ActiveAgent => "ASSISTANT (active)",
                Role::SystemEvent => "EVENT",
            };
            let mut line = format!("{role}: {}", one_line(&m.text));
            if !m.attachments.is_empty() {
                line.push_str(&format!(" [attached images: {}]", m.attachments.join(", ")));
            }
            line
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Keeps the most recent whole lines that fit in `max_chars`.
pub fn truncate_chat_log(log: &str, max_chars: Option<usize>) -> String {
    let Some(max) = max_chars else {
        return log.to_string();
    };
    if log.chars().count() <= max {
        return log.to_string();
    }
    let mut kept: Vec<&str> = Vec::new();
    let mut used = 0;
    for line in log.lines().rev() {
        let cost = line.chars().count() + usize::from(!kept.is_empty());
        if used + cost > max {
            break;
        }
        used += cost;
        kept.push(line);
    }
    kept.reverse();
    kept.join("\n")
}

#[derive(Debug, Clone, Serialize)]
pub struct TemplateInfo {
    pub template_id: TemplateId,
    pub body: &'static str,
    pub placeholders: Vec<&'static str>,
    pub digest: String,
}

/// Every template with its placeholders and digest, for audit.
pub fn catalog() -> Vec<TemplateInfo> {
    TemplateId::ALL
        .into_iter()
        .map(|t| TemplateInfo {
            template_id: t,
            body: t.body(),
            placeholders: t.placeholders().into_iter().map(Placeholder::as_str).collect(),
            digest: sha256_hex(t.body().as_bytes()),
        })
        .collect()
}
