//! LLM traffic: a chat-completion client with bounded concurrency, retries
//! and per-stage accounting, plus a scripted server speaking the same wire
//! protocol for hermetic runs.

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub mod client;
pub mod limiter;
pub mod metrics;
pub mod server;
pub mod transport;

pub use client::{backoff_schedule, Gateway};
pub use limiter::Limiter;
pub use metrics::{Metrics, StageMetrics};
pub use server::{ScriptedServer, ServerOptions};
pub use transport::{HttpTransport, InProcessTransport, Transport, TransportError};

pub const ENV_ENDPOINT: &str = "SCENECHAT_ENDPOINT";
pub const ENV_API_KEY: &str = "SCENECHAT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Live,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Base URL; requests go to `<endpoint_url>/v1/chat/completions`.
    pub endpoint_url: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub max_in_flight: usize,
    /// Retries after the first attempt for transient failures.
    pub retry_budget: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub timeout_ms: u64,
    pub mode: Mode,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000".into(),
            api_key: None,
            max_in_flight: 8,
            retry_budget: 4,
            backoff_base_ms: 250,
            backoff_max_ms: 8_000,
            timeout_ms: 120_000,
            mode: Mode::Live,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if self.timeout_ms == 0 {
            return Err("timeout_ms must be positive".into());
        }
        if self.backoff_max_ms < self.backoff_base_ms {
            return Err("backoff_max_ms must not be below backoff_base_ms".into());
        }
        Ok(())
    }

    /// Applies `SCENECHAT_ENDPOINT` and `SCENECHAT_API_KEY` when set.
    pub fn with_env_overrides(mut self) -> Self {
        self.apply_overrides(std::env::var(ENV_ENDPOINT).ok(), std::env::var(ENV_API_KEY).ok());
        self
    }

    fn apply_overrides(&mut self, endpoint: Option<String>, key: Option<String>) {
        if let Some(e) = endpoint.filter(|e| !e.trim().is_empty()) {
            self.endpoint_url = e;
        }
        if let Some(k) = key.filter(|k| !k.trim().is_empty()) {
            self.api_key = Some(k);
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_only_touch_credentials() {
        let mut c = GatewayConfig::default();
        c.apply_overrides(Some("http://x:1".into()), Some("k".into()));
        assert_eq!(c.endpoint_url, "http://x:1");
        assert_eq!(c.api_key.as_deref(), Some("k"));
        assert_eq!(c.max_in_flight, 8);
        c.apply_overrides(Some(" ".into()), None);
        assert_eq!(c.endpoint_url, "http://x:1");
    }

    #[test]
    fn api_key_never_serialized() {
        let c = GatewayConfig {
            api_key: Some("secret".into()),
            ..Default::default()
        };
        assert!(!serde_json::to_string(&c).unwrap().contains("secret"));
    }

    #[test]
    fn validation() {
        assert!(GatewayConfig::default().validate().is_ok());
        let c = GatewayConfig {
            max_in_flight: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
