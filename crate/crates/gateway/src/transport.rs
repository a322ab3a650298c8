//! One request, one attempt. Retrying and concurrency limits live in
//! [`crate::Gateway`].

use std::sync::Arc;
use std::time::{Duration, Instant};

use scenechat_core::llm::{approx_tokens, ChatRequest, ChatResponse, ScriptBook, ScriptReply, Stage, Usage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::GatewayConfig;

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const MODELS_PATH: &str = "/v1/models";
pub const STAGE_HEADER: &str = "x-pipeline-stage";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    /// Timeouts, connection failures, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("request rejected: {0}")]
    Fatal(String),
    #[error("malformed response: {0}")]
    Malformed(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, TransportError>;

    /// Cheap reachability check; scripted transports are always reachable.
    fn probe(&self) -> Result<(), TransportError> {
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireChoice {
    pub index: u32,
    pub message: WireMessage,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct WireResponse {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub object: String,
    #[serde(default)]
    pub model: String,
    pub choices: Vec<WireChoice>,
    #[serde(default)]
    pub usage: Option<WireUsage>,
}

impl WireResponse {
    pub(crate) fn completion(model: &str, content: String, usage: Usage) -> Self {
        Self {
            id: "chatcmpl-scripted".into(),
            object: "chat.completion".into(),
            model: model.into(),
            choices: vec![WireChoice {
                index: 0,
                message: WireMessage {
                    role: "assistant".into(),
                    content: Some(content),
                },
                finish_reason: Some("stop".into()),
            }],
            usage: Some(WireUsage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
                total_tokens: usage.prompt_tokens + usage.completion_tokens,
            }),
        }
    }

    fn into_response(self, latency: Duration) -> Result<ChatResponse, TransportError> {
        let choice = self
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Malformed("no choices".into()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| TransportError::Malformed("choice has no content".into()))?;
        let usage = self
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            content,
            usage,
            latency_ms: latency.as_millis() as u64,
        })
    }
}

/// Chat-completion client over HTTP.
pub struct HttpTransport {
    agent: ureq::Agent,
    base: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &GatewayConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(cfg.timeout()))
            .max_idle_connections_per_host(cfg.max_in_flight.max(1))
            .build()
            .into();
        Self {
            agent,
            base: cfg.endpoint_url.trim_end_matches('/').to_string(),
            api_key: cfg.api_key.clone(),
        }
    }

    fn classify(e: ureq::Error) -> TransportError {
        match e {
            ureq::Error::Timeout(_)
            | ureq::Error::Io(_)
            | ureq::Error::HostNotFound
            | ureq::Error::ConnectionFailed
            | ureq::Error::BodyStalled => TransportError::Transient(e.to_string()),
            ureq::Error::Json(_) | ureq::Error::Protocol(_) => TransportError::Malformed(e.to_string()),
            other => TransportError::Fatal(other.to_string()),
        }
    }

    fn status_error(status: u16, body: String) -> TransportError {
        let msg = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
        if status == 429 || status == 408 || status >= 500 {
            TransportError::Transient(msg)
        } else {
            TransportError::Fatal(msg)
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let start = Instant::now();
        let mut builder = self
            .agent
            .post(format!("{}{CHAT_PATH}", self.base))
            .header(STAGE_HEADER, stage.as_str());
        if let Some(k) = &self.api_key {
            builder = builder.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = builder.send_json(req).map_err(Self::classify)?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Self::status_error(status, body));
        }
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Malformed(e.to_string()))?;
        wire.into_response(start.elapsed())
    }

    fn probe(&self) -> Result<(), TransportError> {
        let mut builder = self.agent.get(format!("{}{MODELS_PATH}", self.base));
        if let Some(k) = &self.api_key {
            builder = builder.header("Authorization", format!("Bearer {k}"));
        }
        let resp = builder.call().map_err(Self::classify)?;
        match resp.status().as_u16() {
            s if s < 400 => Ok(()),
            s => Err(Self::status_error(s, String::new())),
        }
    }
}

/// Answers from a [`ScriptBook`] without a socket, optionally sleeping a
/// fixed latency per call.
pub struct InProcessTransport {
    book: Arc<ScriptBook>,
    latency: Duration,
}

impl InProcessTransport {
    pub fn new(book: Arc<ScriptBook>) -> Self {
        Self {
            book,
            latency: Duration::ZERO,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }
}

impl Transport for InProcessTransport {
    fn send(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, TransportError> {
        req.validate().map_err(|e| TransportError::Fatal(e.to_string()))?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        match self.book.respond(Some(stage), &req.messages) {
            ScriptReply::Content(content) => Ok(ChatResponse {
                usage: Usage {
                    prompt_tokens: req.messages.iter().map(|m| approx_tokens(&m.content)).sum(),
                    completion_tokens: approx_tokens(&content),
                },
                content,
                latency_ms: self.latency.as_millis() as u64,
            }),
            ScriptReply::Throttled => Err(TransportError::Transient("HTTP 429: throttled".into())),
            ScriptReply::NotFound => Err(TransportError::Fatal(format!(
                "HTTP 404: no scripted reply for digest {}",
                req.digest()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_response_parsing() {
        let json = r#"{"choices":[{"index":0,"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let w: WireResponse = serde_json::from_str(json).unwrap();
        let r = w.into_response(Duration::from_millis(5)).unwrap();
        assert_eq!(r.content, "hi");
        assert_eq!(r.usage.prompt_tokens, 3);
        let empty: WireResponse = serde_json::from_str(r#"{"choices":[]}"#).unwrap();
        assert!(matches!(
            empty.into_response(Duration::ZERO),
            Err(TransportError::Malformed(_))
        ));
    }

    #[test]
    fn status_classification() {
        assert!(matches!(
            HttpTransport::status_error(429, String::new()),
            TransportError::Transient(_)
        ));
        assert!(matches!(
            HttpTransport::status_error(503, String::new()),
            TransportError::Transient(_)
        ));
        assert!(matches!(
            HttpTransport::status_error(404, String::new()),
            TransportError::Fatal(_)
        ));
    }
}
