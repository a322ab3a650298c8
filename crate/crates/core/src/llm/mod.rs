//! Chat-completion request/response types and the [`ChatModel`] seam every
//! LLM-dependent stage goes through.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod script;
pub mod synthetic;

pub use script::{Fallback, FaultPlan, FnModel, ScriptBook, ScriptReply, ScriptedLlm};

/// Pipeline stage issuing a request; used for usage accounting and by the
/// scripted responder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    QaConversion,
    TreeDescription,
    Generation,
    Verification,
    Reduction,
    Quality,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::QaConversion,
        Stage::TreeDescription,
        Stage::Generation,
        Stage::Verification,
        Stage::Reduction,
        Stage::Quality,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::QaConversion => "qa_conversion",
            Stage::TreeDescription => "tree_description",
            Stage::Generation => "generation",
            Stage::Verification => "verification",
            Stage::Reduction => "reduction",
            Stage::Quality => "quality",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        match self.messages.first() {
            None => Err(LlmError::Protocol("request has no messages".into())),
            Some(m) if m.role == Role::Assistant => {
                Err(LlmError::Protocol("first message must be system or user".into()))
            }
            _ if self.temperature.is_nan() || self.temperature < 0.0 => {
                Err(LlmError::Protocol("temperature must be non-negative".into()))
            }
            _ if self.max_tokens == 0 => Err(LlmError::Protocol("max_tokens must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn digest(&self) -> String {
        request_digest(&self.messages)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("LLM unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub trait ChatModel: Send + Sync {
    fn chat(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<T: ChatModel + ?Sized> ChatModel for &T {
    fn chat(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(stage, req)
    }
}

impl<T: ChatModel + ?Sized> ChatModel for Arc<T> {
    fn chat(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(stage, req)
    }
}

/// Fixture key for a request: SHA-256 over the message contents, each
/// followed by an ASCII record separator (0x1e). Roles, temperature and seed
/// are deliberately left out.
pub fn request_digest(messages: &[ChatMessage]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(m.content.as_bytes());
        h.update([0x1e]);
    }
    hex::encode(h.finalize())
}

/// Whitespace token count, used as usage estimate by scripted backends.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Model name and sampling settings shared by all requests of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelProfile {
    pub model: String,
    pub temperature: f64,
    /// Temperature for yes/no style judgements (verification, filtering).
    pub judge_temperature: f64,
    pub max_tokens: u32,
}

impl Default for ModelProfile {
    fn default() -> Self {
        Self {
            model: "default".into(),
            temperature: 0.7,
            judge_temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

impl ModelProfile {
    pub fn request(&self, messages: Vec<ChatMessage>, temperature: f64, seed: Option<u64>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages,
            temperature,
            max_tokens: self.max_tokens,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_roles_and_parameters() {
        let a = vec![ChatMessage::system("s"), ChatMessage::user("u")];
        let b = vec![ChatMessage::user("s"), ChatMessage::user("u")];
        assert_eq!(request_digest(&a), request_digest(&b));
        let c = vec![ChatMessage::user("su")];
        assert_ne!(request_digest(&a), request_digest(&c));
        assert_eq!(request_digest(&a).len(), 64);
    }

    #[test]
    fn request_validation() {
        let p = ModelProfile::default();
        assert!(p.request(vec![ChatMessage::user("x")], 0.0, None).validate().is_ok());
        assert!(p.request(vec![], 0.0, None).validate().is_err());
        let bad = ChatMessage {
            role: Role::Assistant,
            content: "x".into(),
        };
        assert!(p.request(vec![bad], 0.0, None).validate().is_err());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
    }
}
