//! Retrying, concurrency-bounded [`ChatModel`] over any [`Transport`].

use std::sync::Arc;
use std::time::Duration;

use scenechat_core::llm::{ChatModel, ChatRequest, ChatResponse, LlmError, ScriptBook, Stage};
use tracing::warn;

use crate::limiter::Limiter;
use crate::metrics::Metrics;
use crate::transport::{HttpTransport, InProcessTransport, Transport, TransportError};
use crate::GatewayConfig;

/// Delay before retry k (1-based) is `min(base * 2^(k-1), max)`. No jitter,
/// so runs are reproducible and delays never decrease.
pub fn backoff_schedule(cfg: &GatewayConfig) -> Vec<Duration> {
    (0..cfg.retry_budget)
        .map(|k| {
            let factor = 1u64.checked_shl(k).unwrap_or(u64::MAX);
            Duration::from_millis(cfg.backoff_base_ms.saturating_mul(factor).min(cfg.backoff_max_ms))
        })
        .collect()
}

pub struct Gateway {
    transport: Box<dyn Transport>,
    limiter: Limiter,
    metrics: Metrics,
    cfg: GatewayConfig,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig, transport: Box<dyn Transport>) -> Result<Self, String> {
        cfg.validate()?;
        Ok(Self {
            transport,
            limiter: Limiter::new(cfg.max_in_flight),
            metrics: Metrics::default(),
            cfg,
        })
    }

    pub fn http(cfg: GatewayConfig) -> Result<Self, String> {
        let t = HttpTransport::new(&cfg);
        Self::new(cfg, Box::new(t))
    }

    pub fn in_process(cfg: GatewayConfig, book: Arc<ScriptBook>, latency: Duration) -> Result<Self, String> {
        Self::new(cfg, Box::new(InProcessTransport::new(book).with_latency(latency)))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn limiter(&self) -> &Limiter {
        &self.limiter
    }

    /// Reachability check, retried like a normal call.
    pub fn probe(&self) -> Result<(), LlmError> {
        let schedule = backoff_schedule(&self.cfg);
        let mut attempt = 0;
        loop {
            match self.transport.probe() {
                Ok(()) => return Ok(()),
                Err(TransportError::Transient(m)) if attempt < schedule.len() => {
                    warn!(attempt, error = %m, "endpoint probe failed; retrying");
                    std::thread::sleep(schedule[attempt]);
                    attempt += 1;
                }
                Err(e) => return Err(LlmError::Unavailable(e.to_string())),
            }
        }
    }
}

impl ChatModel for Gateway {
    fn chat(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let schedule = backoff_schedule(&self.cfg);
        let mut retries = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.transport.send(stage, req)
            };
            match result {
                Ok(resp) => {
                    self.metrics.record(stage, retries, Ok((resp.usage, resp.latency_ms)));
                    return Ok(resp);
                }
                Err(TransportError::Transient(m)) if (retries as usize) < schedule.len() => {
                    warn!(%stage, retry = retries + 1, error = %m, "transient LLM failure");
                    std::thread::sleep(schedule[retries as usize]);
                    retries += 1;
                }
                Err(e) => {
                    self.metrics.record(stage, retries, Err(()));
                    return Err(match e {
                        TransportError::Transient(m) => {
                            LlmError::Unavailable(format!("{m} (after {} attempts)", retries + 1))
                        }
                        TransportError::Fatal(m) => LlmError::Unavailable(m),
                        TransportError::Malformed(m) => LlmError::Protocol(m),
                    });
                }
            }
        }
    }
}
