//! Deterministic scripted responses keyed by request digest.
//!
//! A [`ScriptBook`] maps digests to one or more recorded replies. The n-th
//! time a digest is served it gets the n-th reply (the last one repeats), so
//! retry paths can be scripted. Unknown digests go to a fallback rule.
//! Optional [`FaultPlan`]s inject throttling, unparseable generations and
//! rejected verifications, selected by hashing the digest so that the same
//! requests fail on every run.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    approx_tokens, request_digest, synthetic, ChatMessage, ChatModel, ChatRequest, ChatResponse, LlmError, Role, Stage,
    Usage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Unknown digests are not found.
    #[default]
    None,
    /// Reply with the content of the last user message.
    EchoLastUser,
    /// Stage-aware rule-based responder, see [`synthetic`].
    Synthetic,
}

/// Deterministic fault injection. Each field is a modulus `m`: a request
/// whose salted digest hash is divisible by `m` is affected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// First attempt answered with HTTP 429.
    pub throttle_mod: Option<u64>,
    /// Generation: first reply is unparseable.
    pub garbage_mod: Option<u64>,
    /// Generation: every reply is unparseable.
    pub garbage_always_mod: Option<u64>,
    /// Verification: first verdict is "no".
    pub reject_mod: Option<u64>,
    /// Verification: every verdict is "no".
    pub reject_always_mod: Option<u64>,
}

impl FaultPlan {
    fn hit(modulus: Option<u64>, digest: &str, salt: &str) -> bool {
        let Some(m) = modulus.filter(|m| *m > 0) else {
            return false;
        };
        let mut h = Sha256::new();
        h.update(salt.as_bytes());
        h.update(digest.as_bytes());
        let d = h.finalize();
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        u64::from_le_bytes(b) % m == 0
    }
}

pub const GARBAGE_REPLY: &str = "I am sorry, I cannot produce that right now.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptReply {
    Content(String),
    /// Transient refusal, surfaced as HTTP 429 by servers.
    Throttled,
    NotFound,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct FixtureLine {
    pub digest: String,
    pub response: String,
}

#[derive(Debug, Default)]
struct Counters {
    served: HashMap<String, usize>,
    throttled: HashMap<String, usize>,
}

#[derive(Debug, Default)]
pub struct ScriptBook {
    fixtures: HashMap<String, Vec<String>>,
    fallback: Fallback,
    faults: FaultPlan,
    counters: Mutex<Counters>,
}

impl ScriptBook {
    pub fn new(fallback: Fallback) -> Self {
        Self {
            fallback,
            ..Default::default()
        }
    }

    pub fn with_faults(mut self, faults: FaultPlan) -> Self {
        self.faults = faults;
        self
    }

    /// Appends a reply for `digest`; repeated calls script a sequence.
    pub fn with_fixture(mut self, digest: &str, response: &str) -> Self {
        self.add_fixture(digest, response);
        self
    }

    pub fn add_fixture(&mut self, digest: &str, response: &str) {
        self.fixtures
            .entry(digest.to_string())
            .or_default()
            .push(response.to_string());
    }

    /// Reads a JSON Lines fixture file of `{"digest", "response"}` objects.
    pub fn load_fixtures(&mut self, path: &Path) -> std::io::Result<usize> {
        let f = File::open(path)?;
        let mut n = 0;
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fx: FixtureLine =
                serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            self.add_fixture(&fx.digest, &fx.response);
            n += 1;
        }
        Ok(n)
    }

    pub fn fixture_count(&self) -> usize {
        self.fixtures.values().map(Vec::len).sum()
    }

    /// Answers one request. `stage` may be absent for clients that do not
    /// send it; the synthetic responder then infers it from the prompt.
    pub fn respond(&self, stage: Option<Stage>, messages: &[ChatMessage]) -> ScriptReply {
        let digest = request_digest(messages);
        let mut counters = self.counters.lock().expect("script counters poisoned");
        if FaultPlan::hit(self.faults.throttle_mod, &digest, "throttle") {
            let t = counters.throttled.entry(digest.clone()).or_default();
            *t += 1;
            if *t == 1 {
                return ScriptReply::Throttled;
            }
        }
        let served = counters.served.entry(digest.clone()).or_default();
        let nth = *served;
        *served += 1;
        drop(counters);

        if let Some(replies) = self.fixtures.get(&digest) {
            let i = nth.min(replies.len() - 1);
            return ScriptReply::Content(replies[i].clone());
        }
        let stage = stage.or_else(|| synthetic::infer_stage(messages));
        match (stage, self.faults) {
            (Some(Stage::Generation), f)
                if FaultPlan::hit(f.garbage_always_mod, &digest, "garbage-always")
                    || (nth == 0 && FaultPlan::hit(f.garbage_mod, &digest, "garbage")) =>
            {
                return ScriptReply::Content(GARBAGE_REPLY.into());
            }
            (Some(Stage::Verification), f)
                if FaultPlan::hit(f.reject_always_mod, &digest, "reject-always")
                    || (nth == 0 && FaultPlan::hit(f.reject_mod, &digest, "reject")) =>
            {
                return ScriptReply::Content("no, the turn contradicts the context.".into());
            }
            _ => {}
        }
        match self.fallback {
            Fallback::None => ScriptReply::NotFound,
            Fallback::EchoLastUser => messages
                .iter()
                .rev()
                .find(|m| m.role == Role::User)
                .map(|m| ScriptReply::Content(m.content.clone()))
                .unwrap_or(ScriptReply::NotFound),
            Fallback::Synthetic => match stage {
                Some(s) => ScriptReply::Content(synthetic::respond(s, messages)),
                None => ScriptReply::NotFound,
            },
        }
    }
}

/// In-process [`ChatModel`] backed by a [`ScriptBook`], without transport.
#[derive(Debug)]
pub struct ScriptedLlm {
    book: std::sync::Arc<ScriptBook>,
}

impl ScriptedLlm {
    pub fn new(book: ScriptBook) -> Self {
        Self {
            book: std::sync::Arc::new(book),
        }
    }

    pub fn synthetic() -> Self {
        Self::new(ScriptBook::new(Fallback::Synthetic))
    }

    pub fn book(&self) -> &ScriptBook {
        &self.book
    }
}

impl ChatModel for ScriptedLlm {
    fn chat(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        match self.book.respond(Some(stage), &req.messages) {
            ScriptReply::Content(content) => Ok(ChatResponse {
                usage: Usage {
                    prompt_tokens: req.messages.iter().map(|m| approx_tokens(&m.content)).sum(),
                    completion_tokens: approx_tokens(&content),
                },
                content,
                latency_ms: 0,
            }),
            ScriptReply::Throttled => Err(LlmError::Unavailable("throttled".into())),
            ScriptReply::NotFound => Err(LlmError::Unavailable(format!(
                "no scripted reply for digest {}",
                req.digest()
            ))),
        }
    }
}

/// Closure-backed model for tests.
pub struct FnModel<F>(pub F);

impl<F> ChatModel for FnModel<F>
where
    F: Fn(Stage, &ChatRequest) -> Result<String, LlmError> + Send + Sync,
{
    fn chat(&self, stage: Stage, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let content = (self.0)(stage, req)?;
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: 0,
                completion_tokens: approx_tokens(&content),
            },
            content,
            latency_ms: 0,
        })
    }
}
