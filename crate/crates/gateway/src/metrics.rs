//! Per-stage call accounting.

use std::collections::BTreeMap;
use std::sync::Mutex;

use scenechat_core::llm::{Stage, Usage};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub calls: u64,
    /// Attempts beyond the first, summed over calls.
    pub retries: u64,
    pub failures: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    /// Largest retry count seen on a single call.
    pub max_retries: u32,
}

#[derive(Debug, Default)]
pub struct Metrics {
    stages: Mutex<BTreeMap<Stage, StageMetrics>>,
}

impl Metrics {
    pub fn record(&self, stage: Stage, retries: u32, outcome: Result<(Usage, u64), ()>) {
        let mut map = self.stages.lock().expect("metrics poisoned");
        let m = map.entry(stage).or_default();
        m.calls += 1;
        m.retries += u64::from(retries);
        m.max_retries = m.max_retries.max(retries);
        match outcome {
            Ok((usage, latency)) => {
                m.prompt_tokens += usage.prompt_tokens;
                m.completion_tokens += usage.completion_tokens;
                m.latency_ms += latency;
            }
            Err(()) => m.failures += 1,
        }
    }

    pub fn snapshot(&self) -> BTreeMap<Stage, StageMetrics> {
        self.stages.lock().expect("metrics poisoned").clone()
    }

    pub fn total(&self) -> StageMetrics {
        self.snapshot().values().fold(StageMetrics::default(), |mut acc, m| {
            acc.calls += m.calls;
            acc.retries += m.retries;
            acc.failures += m.failures;
            acc.prompt_tokens += m.prompt_tokens;
            acc.completion_tokens += m.completion_tokens;
            acc.latency_ms += m.latency_ms;
            acc.max_retries = acc.max_retries.max(m.max_retries);
            acc
        })
    }
}
