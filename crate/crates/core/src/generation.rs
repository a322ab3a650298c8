//! Iterative turn generation over a shrinking context.
//!
//! Each iteration samples a template, renders it with the remaining context
//! S_i, parses a turn, verifies it against the full context S, optionally
//! runs the quality filter, appends it and removes the sentences it covered
//! from S_i. The loop stops once S_i is short in absolute terms or relative
//! to S, or after `max_turns` iterations.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::context::ContextSet;
use crate::llm::{ChatMessage, ChatModel, LlmError, ModelProfile, Stage};
use crate::metadata::ImageRef;
use crate::prompts::{fill, numbered, parse_conversation, render, PromptError, PromptSet, PromptTemplate};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("no parseable turn after {attempts} attempts")]
    GenerationFailed { attempts: u32 },
    #[error("no turns generated: {reason}")]
    NoTurnsGenerated { reason: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionMode {
    /// Context is never reduced.
    Off,
    /// Content-word overlap only.
    Lexical,
    /// LLM lists covered sentences; lexical when the reply is unusable.
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// r_t: stop once more than this fraction of context chars is gone.
    pub reduction_threshold: f64,
    /// l_min: stop once fewer chars than this remain.
    pub min_context_chars: usize,
    /// Generation attempts per template, counting parse and verification
    /// failures alike.
    pub max_retries: u32,
    pub quality_filter: bool,
    pub verify: bool,
    pub reduction: ReductionMode,
    pub max_turns: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            reduction_threshold: 0.85,
            min_context_chars: 100,
            max_retries: 3,
            quality_filter: true,
            verify: true,
            reduction: ReductionMode::Llm,
            max_turns: 12,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidParams(m.into()));
        if !(self.reduction_threshold > 0.0 && self.reduction_threshold < 1.0) {
            return bad("reduction_threshold must be in (0, 1)");
        }
        if self.min_context_chars == 0 {
            return bad("min_context_chars must be positive");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1");
        }
        if self.max_turns == 0 {
            return bad("max_turns must be at least 1");
        }
        Ok(())
    }

    /// Largest iteration count `generate_conversation` can reach.
    pub fn iteration_bound(&self) -> u32 {
        self.max_turns
    }
}

const SCALE: u128 = 1_000_000_000;

/// True iff remaining/total < 1 - r_t or remaining < l_min. The ratio test is
/// done in integers with r_t rounded to nine decimals, so thresholds such as
/// 0.85 are exact.
pub fn should_stop(remaining: usize, total: usize, p: &GenerationParams) -> bool {
    if total == 0 || remaining < p.min_context_chars {
        return true;
    }
    let keep = ((1.0 - p.reduction_threshold) * SCALE as f64).round() as u128;
    (remaining as u128) * SCALE < keep * total as u128
}

pub fn stopping_criteria(s_i: &ContextSet, s: &ContextSet, p: &GenerationParams) -> bool {
    should_stop(s_i.total_chars, s.total_chars, p)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub human: String,
    pub assistant: String,
    pub template_id: String,
    pub iteration: u32,
    /// Generation calls spent on this turn under its final template.
    pub attempts: u32,
    /// `None` when verification is disabled.
    pub verified: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub keep: bool,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityRecord {
    pub iteration: u32,
    pub keep: bool,
    pub verdict: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ContextExhausted,
    MaxTurns,
    NoCompatibleTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub context_chars_initial: usize,
    pub context_chars_final: usize,
    pub context_sentences_initial: usize,
    pub context_sentences_final: usize,
    pub templates_used: Vec<String>,
    pub retries_total: u32,
    pub verification_failures: u32,
    pub filtered_turns: u32,
    pub abandoned_iterations: u32,
    pub iterations: u32,
    pub quality: Vec<QualityRecord>,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub image: ImageRef,
    pub turns: Vec<Turn>,
    pub provenance: Provenance,
}

static STOPWORDS: LazyLock<BTreeSet<&'static str>> = LazyLock::new(|| {
    [
        "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "by", "from", "is", "are",
        "was", "were", "be", "been", "it", "its", "this", "that", "these", "those", "there", "here", "image",
        "picture", "photo", "what", "which", "who", "how", "can", "you", "i", "me", "my", "we", "as", "has", "have",
        "do", "does", "some", "any", "into", "near", "about", "also", "see", "shows",
    ]
    .into_iter()
    .collect()
});

/// Lowercased alphanumeric tokens minus a small stopword list.
pub fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(w.as_str()))
        .collect()
}

pub const LEXICAL_OVERLAP: f64 = 0.6;

/// Drops sentences whose content words are at least 60% present in the
/// turn. Sentences without content words are kept.
pub fn lexical_reduce(ctx: &ContextSet, turn: &Turn) -> ContextSet {
    let turn_words = content_words(&format!("{} {}", turn.human, turn.assistant));
    ctx.retain_indices(|i| {
        let words = content_words(&ctx.sentences[i].text);
        if words.is_empty() {
            return true;
        }
        let shared = words.iter().filter(|w| turn_words.contains(*w)).count();
        (shared as f64) < LEXICAL_OVERLAP * words.len() as f64
    })
}

fn first_token(reply: &str) -> String {
    reply
        .split_whitespace()
        .next()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Strict yes/no parse of the first token.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    match first_token(reply).as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub fn parse_keep_drop(reply: &str) -> Option<bool> {
    match first_token(reply).as_str() {
        "keep" => Some(true),
        "drop" => Some(false),
        _ => None,
    }
}

static INDEX: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Zero-based indices from a reduction reply, or `None` when the reply is
/// neither "none" nor contains an in-range number.
pub fn parse_covered(reply: &str, n: usize) -> Option<BTreeSet<usize>> {
    if first_token(reply) == "none" {
        return Some(BTreeSet::new());
    }
    let idx: BTreeSet<usize> = INDEX
        .find_iter(reply)
        .filter_map(|m| m.as_str().parse::<usize>().ok())
        .filter(|i| (1..=n).contains(i))
        .map(|i| i - 1)
        .collect();
    (!idx.is_empty()).then_some(idx)
}

pub struct Generator<'a> {
    pub llm: &'a dyn ChatModel,
    pub prompts: &'a PromptSet,
    pub profile: &'a ModelProfile,
    pub params: &'a GenerationParams,
}

enum Attempt {
    Accepted(Turn),
    Exhausted,
}

impl<'a> Generator<'a> {
    pub fn new(
        llm: &'a dyn ChatModel,
        prompts: &'a PromptSet,
        profile: &'a ModelProfile,
        params: &'a GenerationParams,
    ) -> Self {
        Self {
            llm,
            prompts,
            profile,
            params,
        }
    }

    fn judge(&self, stage: Stage, prompt: String) -> Result<String, LlmError> {
        let req = self
            .profile
            .request(vec![ChatMessage::user(prompt)], self.profile.judge_temperature, None);
        Ok(self.llm.chat(stage, &req)?.content)
    }

    fn turn_prompt(&self, task: &str, turn: &Turn, ctx: &ContextSet) -> Result<String, PromptError> {
        fill(
            task,
            &[
                ("context", &numbered(&ctx.sentences)),
                ("human", &turn.human),
                ("assistant", &turn.assistant),
            ],
        )
    }

    /// One generation call; `None` when the reply has no complete pair.
    fn generate_once(
        &self,
        s_i: &ContextSet,
        template: &PromptTemplate,
        iteration: u32,
        seed: Option<u64>,
    ) -> Result<Option<Turn>, GenError> {
        let messages = vec![
            ChatMessage::system(self.prompts.tasks.generation_system.clone()),
            ChatMessage::user(render(template, s_i)?),
        ];
        let req = self.profile.request(messages, self.profile.temperature, seed);
        let reply = self.llm.chat(Stage::Generation, &req)?.content;
        Ok(parse_conversation(&reply)
            .into_iter()
            .next()
            .map(|(human, assistant)| Turn {
                human,
                assistant,
                template_id: template.template_id.clone(),
                iteration,
                attempts: 1,
                verified: None,
            }))
    }

    /// Generates a turn, retrying unparseable replies up to `max_retries`
    /// calls in total.
    pub fn generate_turn(&self, s_i: &ContextSet, template: &PromptTemplate, iteration: u32) -> Result<Turn, GenError> {
        for attempt in 1..=self.params.max_retries {
            if let Some(mut t) = self.generate_once(s_i, template, iteration, None)? {
                t.attempts = attempt;
                return Ok(t);
            }
        }
        Err(GenError::GenerationFailed {
            attempts: self.params.max_retries,
        })
    }

    /// Asks whether the turn is consistent with the full context. A verdict
    /// that stays unparseable after `max_retries` calls counts as failure.
    pub fn verify_turn(&self, turn: &Turn, full: &ContextSet) -> Result<bool, GenError> {
        let prompt = self.turn_prompt(&self.prompts.tasks.verify, turn, full)?;
        for _ in 0..self.params.max_retries {
            if let Some(v) = parse_yes_no(&self.judge(Stage::Verification, prompt.clone())?) {
                return Ok(v);
            }
        }
        Ok(false)
    }

    pub fn reduce_context(&self, s_i: &ContextSet, turn: &Turn) -> Result<ContextSet, GenError> {
        match self.params.reduction {
            ReductionMode::Off => Ok(s_i.clone()),
            ReductionMode::Lexical => Ok(lexical_reduce(s_i, turn)),
            ReductionMode::Llm => {
                let prompt = self.turn_prompt(&self.prompts.tasks.reduce, turn, s_i)?;
                let reply = self.judge(Stage::Reduction, prompt)?;
                Ok(match parse_covered(&reply, s_i.len()) {
                    Some(covered) => s_i.retain_indices(|i| !covered.contains(&i)),
                    None => {
                        debug!("reduction reply unusable; lexical fallback");
                        lexical_reduce(s_i, turn)
                    }
                })
            }
        }
    }

    /// An unparseable verdict keeps the turn.
    pub fn quality_filter(&self, turn: &Turn, full: &ContextSet) -> Result<QualityVerdict, GenError> {
        let prompt = self.turn_prompt(&self.prompts.tasks.quality, turn, full)?;
        let mut last = String::new();
        for _ in 0..self.params.max_retries {
            last = self.judge(Stage::Quality, prompt.clone())?;
            if let Some(keep) = parse_keep_drop(&last) {
                return Ok(QualityVerdict {
                    keep,
                    verdict: last.trim().to_string(),
                });
            }
        }
        Ok(QualityVerdict {
            keep: true,
            verdict: format!("unparseable: {}", last.trim()),
        })
    }

    /// Up to `max_retries` generations with one template; each parse or
    /// verification failure consumes one.
    fn attempt_template(
        &self,
        s_i: &ContextSet,
        full: &ContextSet,
        template: &PromptTemplate,
        iteration: u32,
        seed: u64,
        prov: &mut Provenance,
    ) -> Result<Attempt, GenError> {
        for attempt in 1..=self.params.max_retries {
            if attempt > 1 {
                prov.retries_total += 1;
            }
            let call_seed = seed
                .wrapping_add(u64::from(iteration) << 8)
                .wrapping_add(u64::from(attempt));
            let Some(mut turn) = self.generate_once(s_i, template, iteration, Some(call_seed))? else {
                continue;
            };
            turn.attempts = attempt;
            if self.params.verify {
                let ok = self.verify_turn(&turn, full)?;
                if !ok {
                    prov.verification_failures += 1;
                    continue;
                }
                turn.verified = Some(true);
            }
            return Ok(Attempt::Accepted(turn));
        }
        Ok(Attempt::Exhausted)
    }

    pub fn generate_conversation(&self, full: &ContextSet, seed: u64) -> Result<Conversation, GenError> {
        self.generate_conversation_with_tree(full, seed, None)
    }

    pub fn generate_conversation_with_tree(
        &self,
        full: &ContextSet,
        seed: u64,
        tree: Option<String>,
    ) -> Result<Conversation, GenError> {
        self.params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prov = Provenance {
            seed,
            context_chars_initial: full.total_chars,
            context_chars_final: full.total_chars,
            context_sentences_initial: full.len(),
            context_sentences_final: full.len(),
            templates_used: Vec::new(),
            retries_total: 0,
            verification_failures: 0,
            filtered_turns: 0,
            abandoned_iterations: 0,
            iterations: 0,
            quality: Vec::new(),
            stop_reason: StopReason::ContextExhausted,
            tree,
        };
        let mut turns = Vec::new();
        let mut s_i = full.clone();

        while !stopping_criteria(&s_i, full, self.params) {
            if prov.iterations >= self.params.max_turns {
                prov.stop_reason = StopReason::MaxTurns;
                break;
            }
            let iteration = prov.iterations;
            prov.iterations += 1;

            let template = match self.prompts.sample_excluding(&s_i, &mut rng, None) {
                Ok(t) => t,
                Err(PromptError::NoCompatibleTemplate) => {
                    prov.stop_reason = StopReason::NoCompatibleTemplate;
                    break;
                }
                Err(e) => return Err(e.into()),
            };
            let mut outcome = self.attempt_template(&s_i, full, template, iteration, seed, &mut prov)?;
            if matches!(outcome, Attempt::Exhausted) {
                if let Ok(alt) = self
                    .prompts
                    .sample_excluding(&s_i, &mut rng, Some(&template.template_id))
                {
                    prov.retries_total += 1;
                    outcome = self.attempt_template(&s_i, full, alt, iteration, seed ^ 0x5eed, &mut prov)?;
                }
            }
            let Attempt::Accepted(turn) = outcome else {
                prov.abandoned_iterations += 1;
                continue;
            };

            if self.params.quality_filter {
                let v = self.quality_filter(&turn, full)?;
                prov.quality.push(QualityRecord {
                    iteration,
                    keep: v.keep,
                    verdict: v.verdict,
                });
                if !v.keep {
                    prov.filtered_turns += 1;
                    continue;
                }
            }

            s_i = self.reduce_context(&s_i, &turn)?;
            prov.templates_used.push(turn.template_id.clone());
            turns.push(turn);
        }

        prov.context_chars_final = s_i.total_chars;
        prov.context_sentences_final = s_i.len();
        if turns.is_empty() {
            let reason = if prov.iterations == 0 {
                format!(
                    "context of {} chars already meets the stopping criteria",
                    full.total_chars
                )
            } else {
                format!("{} iterations yielded no accepted turn", prov.iterations)
            };
            return Err(GenError::NoTurnsGenerated { reason });
        }
        Ok(Conversation {
            image: full.image.clone(),
            turns,
            provenance: prov,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ContextSentence, Origin};
    use crate::llm::{FnModel, ScriptedLlm};
    use crate::prompts::{Intent, PromptDistribution, TaskPrompts};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn image() -> ImageRef {
        ImageRef::new("d", "1", "1.jpg", 640, 480)
    }

    fn ctx_of(texts: &[&str]) -> ContextSet {
        ContextSet::new(
            image(),
            texts
                .iter()
                .map(|t| ContextSentence::new(t, Origin::Caption, "c").unwrap())
                .collect(),
        )
    }

    /// Sentences of exactly `len` chars with disjoint vocabularies.
    fn sized_ctx(n: usize, len: usize) -> ContextSet {
        let texts: Vec<String> = (0..n)
            .map(|i| {
                let mut s = format!("Item{i}");
                while s.len() < len {
                    s.push_str(&format!(" t{i}q"));
                }
                s.truncate(len - 1);
                if s.ends_with(' ') {
                    s.pop();
                    s.push('z');
                }
                s.push('.');
                s
            })
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let c = ctx_of(&refs);
        assert!(c.sentences.iter().all(|s| s.char_len == len));
        c
    }

    fn prompt_set() -> PromptSet {
        PromptSet::new(
            "t",
            vec![
                PromptTemplate::new("a", Intent::Conversation, "A\n{context}\nHuman: <q>", BTreeSet::new()).unwrap(),
                PromptTemplate::new("b", Intent::Conversation, "B\n{context}\nHuman: <q>", BTreeSet::new()).unwrap(),
            ],
            PromptDistribution::new(vec![("a".into(), 1.0), ("b".into(), 1.0)]).unwrap(),
            TaskPrompts::builtin(),
        )
        .unwrap()
    }

    fn turn(h: &str, a: &str) -> Turn {
        Turn {
            human: h.into(),
            assistant: a.into(),
            template_id: "a".into(),
            iteration: 0,
            attempts: 1,
            verified: None,
        }
    }

    fn run<T>(llm: &dyn ChatModel, params: GenerationParams, f: impl FnOnce(&Generator) -> T) -> T {
        let set = prompt_set();
        let profile = ModelProfile::default();
        f(&Generator::new(llm, &set, &profile, &params))
    }

    #[test]
    fn stopping_examples() {
        let p = GenerationParams::default();
        assert!(should_stop(120, 1000, &p));
        assert!(!should_stop(500, 1000, &p));
        assert!(!should_stop(150, 1000, &p));
        assert!(should_stop(149, 1000, &p));
        for total in [99, 100, 5000] {
            assert!(should_stop(99, total, &p));
        }
        assert!(should_stop(0, 0, &p));
    }

    #[test]
    fn parse_verdicts() {
        assert_eq!(parse_yes_no("Yes, consistent."), Some(true));
        assert_eq!(parse_yes_no("**No**"), Some(false));
        assert_eq!(parse_yes_no("maybe yes"), None);
        assert_eq!(parse_keep_drop("drop: irrelevant"), Some(false));
        assert_eq!(parse_covered("2, 5 and 9", 6), Some(BTreeSet::from([1, 4])));
        assert_eq!(parse_covered("None.", 3), Some(BTreeSet::new()));
        assert_eq!(parse_covered("all of them", 3), None);
    }

    #[test]
    fn scripted_turn_parsed() {
        let llm = FnModel(|_, _: &_| Ok("Human: What is it?\nAssistant: A dog.".to_string()));
        run(&llm, GenerationParams::default(), |g| {
            let set = prompt_set();
            let t = g
                .generate_turn(&ctx_of(&["A dog."]), set.template("a").unwrap(), 0)
                .unwrap();
            assert_eq!(
                (t.human.as_str(), t.assistant.as_str(), t.attempts),
                ("What is it?", "A dog.", 1)
            );
        });
    }

    #[test]
    fn garbage_three_times_fails() {
        let calls = AtomicUsize::new(0);
        let llm = FnModel(|_, _: &_| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("nonsense".to_string())
        });
        run(&llm, GenerationParams::default(), |g| {
            let set = prompt_set();
            let r = g.generate_turn(&ctx_of(&["A dog."]), set.template("a").unwrap(), 0);
            assert!(matches!(r, Err(GenError::GenerationFailed { attempts: 3 })));
        });
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn garbage_once_then_valid() {
        let calls = AtomicUsize::new(0);
        let llm = FnModel(|_, _: &_| {
            Ok(if calls.fetch_add(1, Ordering::SeqCst) == 0 {
                "oops".to_string()
            } else {
                "Human: q\nAssistant: a".to_string()
            })
        });
        run(&llm, GenerationParams::default(), |g| {
            let set = prompt_set();
            let t = g.generate_turn(&ctx_of(&["x"]), set.template("a").unwrap(), 0).unwrap();
            assert_eq!(t.attempts, 2);
        });
    }

    #[test]
    fn verification_verdicts() {
        let full = ctx_of(&["There is a red car."]);
        let yes = FnModel(|_, _: &_| Ok("Yes".to_string()));
        run(&yes, GenerationParams::default(), |g| {
            assert!(g.verify_turn(&turn("Car?", "There is a red car."), &full).unwrap());
        });
        let no = FnModel(|_, _: &_| Ok("no, the car is red".to_string()));
        run(&no, GenerationParams::default(), |g| {
            assert!(!g.verify_turn(&turn("Car color?", "The car is blue."), &full).unwrap());
        });
        let calls = AtomicUsize::new(0);
        let maybe = FnModel(|_, _: &_| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("maybe".to_string())
        });
        run(&maybe, GenerationParams::default(), |g| {
            assert!(!g.verify_turn(&turn("?", "!"), &full).unwrap());
        });
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn lexical_reduction_examples() {
        let c = ctx_of(&[
            "A dog sleeps on the sofa.",
            "A red car is parked outside.",
            "Clouds fill the sky.",
        ]);
        let out = lexical_reduce(&c, &turn("What is parked?", "A red car is parked outside."));
        assert_eq!(out.len(), 2);
        assert!(out.sentences.iter().all(|s| !s.text.contains("car")));
        let same = lexical_reduce(&c, &turn("Hello?", "Nothing relevant whatsoever."));
        assert_eq!(same, c);
    }

    #[test]
    fn llm_reduction_matches_set_difference() {
        let c = ctx_of(&["One.", "Two.", "Three.", "Four.", "Five.", "Six."]);
        let script = "2, 4, 5";
        let llm = FnModel(move |_, _: &_| Ok(script.to_string()));
        run(&llm, GenerationParams::default(), |g| {
            let out = g.reduce_context(&c, &turn("q", "a")).unwrap();
            let removed: BTreeSet<usize> = [1, 3, 4].into();
            let expected: Vec<&str> = c
                .sentences
                .iter()
                .enumerate()
                .filter(|(i, _)| !removed.contains(i))
                .map(|(_, s)| s.text.as_str())
                .collect();
            assert_eq!(
                out.sentences.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(),
                expected
            );
            assert_eq!(
                out.total_chars,
                expected.iter().map(|s| s.chars().count()).sum::<usize>()
            );
        });
    }

    #[test]
    fn quality_verdicts_tally() {
        let verdicts: Vec<&str> = (0..30)
            .map(|i| match i % 5 {
                0 => "drop: irrelevant",
                3 => "Keep.",
                4 => "unsure",
                _ => "keep",
            })
            .collect();
        let next = AtomicUsize::new(0);
        let seq = verdicts.clone();
        let llm = FnModel(move |_, _: &_| Ok(seq[next.fetch_add(1, Ordering::SeqCst) % 30].to_string()));
        let params = GenerationParams {
            max_retries: 1,
            ..Default::default()
        };
        let full = ctx_of(&["x"]);
        let (kept, dropped) = run(&llm, params, |g| {
            let mut k = 0;
            let mut d = 0;
            for _ in 0..30 {
                if g.quality_filter(&turn("q", "a"), &full).unwrap().keep {
                    k += 1
                } else {
                    d += 1
                }
            }
            (k, d)
        });
        let oracle_drop = verdicts.iter().filter(|v| v.starts_with("drop")).count();
        assert_eq!((kept, dropped), (30 - oracle_drop, oracle_drop));
    }

    /// Replays the loop arithmetic for the synthetic responder: each turn
    /// covers the first ceil(n/3) remaining sentences.
    fn simulate(n: usize, len: usize, p: &GenerationParams) -> usize {
        let total = n * len;
        let mut left = n;
        let mut turns = 0;
        while !should_stop(left * len, total, p) && turns < p.max_turns as usize {
            left -= left.div_ceil(3);
            turns += 1;
        }
        turns
    }

    #[test]
    fn thousand_chars_three_or_four_turns() {
        let full = sized_ctx(10, 100);
        assert_eq!(full.total_chars, 1000);
        let llm = ScriptedLlm::synthetic();
        let params = GenerationParams::default();
        let conv = run(&llm, params.clone(), |g| g.generate_conversation(&full, 7).unwrap());
        let expected = simulate(10, 100, &params);
        assert!((3..=4).contains(&expected));
        assert_eq!(conv.turns.len(), expected);
        assert_eq!(conv.provenance.stop_reason, StopReason::ContextExhausted);
        let p = &conv.provenance;
        assert!(p.context_chars_final * 100 < 15 * p.context_chars_initial || p.context_chars_final < 100);
    }

    #[test]
    fn short_context_generates_nothing() {
        let full = ctx_of(&["x".repeat(80).as_str()]);
        let llm = FnModel(|_, _: &_| panic!("must not be called"));
        run(&llm, GenerationParams::default(), |g| {
            assert!(matches!(
                g.generate_conversation(&full, 1),
                Err(GenError::NoTurnsGenerated { .. })
            ));
        });
    }

    #[test]
    fn consumes_at_least_85_percent() {
        let full = sized_ctx(20, 60);
        let llm = ScriptedLlm::synthetic();
        let conv = run(&llm, GenerationParams::default(), |g| {
            g.generate_conversation(&full, 3).unwrap()
        });
        let p = &conv.provenance;
        assert!((p.context_chars_final as f64 / p.context_chars_initial as f64) < 0.15);
    }

    #[test]
    fn failed_verification_regenerates_then_resamples() {
        let gens: Mutex<Vec<String>> = Mutex::new(Vec::new());
        let llm = FnModel(|stage, req: &crate::llm::ChatRequest| {
            Ok(match stage {
                Stage::Generation => {
                    let body = &req.messages[1].content;
                    gens.lock().unwrap().push(body[..1].to_string());
                    format!("Human: q\nAssistant: {}", &body[..1])
                }
                Stage::Verification => if req.messages[0].content.contains("Assistant: A") {
                    "no"
                } else {
                    "yes"
                }
                .to_string(),
                Stage::Reduction => "1".to_string(),
                _ => "keep".to_string(),
            })
        });
        let full = ctx_of(&[&"a".repeat(120), &"b".repeat(30)]);
        let conv = run(&llm, GenerationParams::default(), |g| {
            g.generate_conversation(&full, 0).unwrap()
        });
        assert!(conv
            .turns
            .iter()
            .all(|t| t.template_id == "b" && t.verified == Some(true)));
        let g = gens.lock().unwrap();
        // Every use of template a burns the full budget of three.
        let a_runs = g.iter().filter(|x| *x == "A").count();
        assert_eq!(a_runs % 3, 0);
        assert!(conv.turns.iter().all(|t| t.attempts <= 3));
        assert_eq!(conv.provenance.verification_failures as usize, a_runs);
    }

    #[test]
    fn quality_drop_keeps_context() {
        let full = sized_ctx(6, 50);
        let llm = FnModel(|stage, _: &_| {
            Ok(match stage {
                Stage::Generation => "Human: q\nAssistant: a".to_string(),
                Stage::Quality => "drop: vague".to_string(),
                _ => "yes".to_string(),
            })
        });
        run(&llm, GenerationParams::default(), |g| {
            let r = g.generate_conversation(&full, 0);
            assert!(matches!(r, Err(GenError::NoTurnsGenerated { .. })));
        });
    }

    #[test]
    fn max_turns_caps_the_loop() {
        let full = sized_ctx(10, 100);
        let calls = AtomicUsize::new(0);
        let llm = FnModel(|stage, _: &_| {
            if stage == Stage::Generation {
                calls.fetch_add(1, Ordering::SeqCst);
            }
            Ok(match stage {
                Stage::Generation => "Human: q\nAssistant: nothing".to_string(),
                Stage::Reduction => "none".to_string(),
                Stage::Quality => "keep".to_string(),
                _ => "yes".to_string(),
            })
        });
        let conv = run(&llm, GenerationParams::default(), |g| {
            g.generate_conversation(&full, 0).unwrap()
        });
        assert_eq!(conv.turns.len(), 12);
        assert_eq!(conv.provenance.stop_reason, StopReason::MaxTurns);
        assert_eq!(calls.load(Ordering::SeqCst), 12);
    }

    #[test]
    fn seed_determinism() {
        let full = sized_ctx(12, 70);
        let go = || {
            let llm = ScriptedLlm::synthetic();
            let set = PromptSet::builtin();
            let profile = ModelProfile::default();
            let params = GenerationParams::default();
            let g = Generator::new(&llm, &set, &profile, &params);
            serde_json::to_string(&g.generate_conversation(&full, 99).unwrap()).unwrap()
        };
        assert_eq!(go(), go());
    }

    proptest! {
        #[test]
        fn stop_rule_matches_rational_oracle(total in 1usize..20_000, frac in 0.0f64..=1.0) {
            let remaining = ((total as f64) * frac) as usize;
            let p = GenerationParams::default();
            let oracle = remaining * 100 < 15 * total || remaining < 100;
            prop_assert_eq!(should_stop(remaining, total, &p), oracle);
        }

        #[test]
        fn loop_invariants(n in 1usize..15, len in 20usize..120, seed in any::<u64>(), lexical in any::<bool>()) {
            let full = sized_ctx(n, len);
            let llm = ScriptedLlm::synthetic();
            let set = PromptSet::builtin();
            let profile = ModelProfile::default();
            let params = GenerationParams {
                reduction: if lexical { ReductionMode::Lexical } else { ReductionMode::Llm },
                ..Default::default()
            };
            let g = Generator::new(&llm, &set, &profile, &params);
            match g.generate_conversation(&full, seed) {
                Ok(conv) => {
                    let p = &conv.provenance;
                    prop_assert!(p.iterations <= params.iteration_bound());
                    prop_assert!(p.context_chars_final <= p.context_chars_initial);
                    prop_assert!(conv.turns.iter().all(|t| t.verified == Some(true) && t.attempts <= 3));
                    prop_assert!(!conv.turns.is_empty());
                }
                Err(GenError::NoTurnsGenerated { .. }) => prop_assert!(should_stop(full.total_chars, full.total_chars, &params)),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }

        #[test]
        fn reduction_is_a_subsequence(words in prop::collection::vec("[a-z]{2,6}", 1..8), human in "[a-z ]{0,30}", assistant in "[a-z ]{0,30}") {
            let texts: Vec<String> = words.iter().map(|w| format!("The {w} sits here.")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let c = ctx_of(&refs);
            let out = lexical_reduce(&c, &turn(&human, &assistant));
            let mut it = c.sentences.iter();
            for s in &out.sentences {
                prop_assert!(it.any(|x| x == s));
            }
            prop_assert!(out.total_chars <= c.total_chars);
        }
    }
}
