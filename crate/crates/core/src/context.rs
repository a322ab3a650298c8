//! Builds the flat context set S: captions verbatim, scene-tree sentences,
//! then QA pairs rewritten as statements.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::llm::{ChatMessage, ChatModel, LlmError, ModelProfile, Stage};
use crate::metadata::{BoxAnnotation, ImageRef, MetadataBundle, QaAnnotation};
use crate::prompts::{fill, PromptError, TaskPrompts};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("tree description produced no sentences")]
    EmptyDescription,
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Caption,
    Qa,
    Tree,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Caption => "caption",
            Origin::Qa => "qa",
            Origin::Tree => "tree",
        })
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "caption" => Ok(Origin::Caption),
            "qa" => Ok(Origin::Qa),
            "tree" => Ok(Origin::Tree),
            other => Err(format!("unknown origin `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSentence {
    pub text: String,
    pub origin: Origin,
    pub source: String,
    pub char_len: usize,
}

impl ContextSentence {
    /// Collapses all whitespace runs (newlines included) to single spaces.
    /// Returns `None` for blank text.
    pub fn new(text: &str, origin: Origin, source: &str) -> Option<Self> {
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return None;
        }
        Some(Self {
            char_len: text.chars().count(),
            text,
            origin,
            source: source.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSet {
    pub image: ImageRef,
    pub sentences: Vec<ContextSentence>,
    pub total_chars: usize,
}

impl ContextSet {
    pub fn new(image: ImageRef, sentences: Vec<ContextSentence>) -> Self {
        let total_chars = sentences.iter().map(|s| s.char_len).sum();
        Self {
            image,
            sentences,
            total_chars,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn origins(&self) -> BTreeSet<Origin> {
        self.sentences.iter().map(|s| s.origin).collect()
    }

    /// Keeps sentences whose index satisfies `keep`, preserving order.
    pub fn retain_indices(&self, keep: impl Fn(usize) -> bool) -> ContextSet {
        let sentences = self
            .sentences
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, s)| s.clone())
            .collect();
        ContextSet::new(self.image.clone(), sentences)
    }

    pub fn count_by_origin(&self, origin: Origin) -> usize {
        self.sentences.iter().filter(|s| s.origin == origin).count()
    }
}

static TERMINATOR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"[.!?]+["')\]]*(\s+|$)|\n+"#).unwrap());

/// Splits on `.`, `!` or `?` (optionally followed by closing quotes or
/// brackets) when followed by whitespace or end of text, and on newlines.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in TERMINATOR.find_iter(text) {
        let piece = text[last..m.end()].trim();
        if !piece.is_empty() {
            out.push(piece.to_string());
        }
        last = m.end();
    }
    let tail = text[last..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

pub fn qa_fallback(qa: &QaAnnotation) -> String {
    format!(
        "Regarding '{}', the answer is {}.",
        qa.question.trim(),
        qa.answer.trim()
    )
}

fn acceptable_statement(s: &str) -> bool {
    let t = s.trim();
    !t.is_empty() && !t.ends_with('?')
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

static NUMBERED_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(\d+)\s*[.):]\s*(.+?)\s*$").unwrap());

/// Sentences for boxes when the tree conversion is disabled: one plain
/// statement per box with raw coordinates.
pub fn boxes_as_sentences(boxes: &[BoxAnnotation]) -> Vec<ContextSentence> {
    boxes
        .iter()
        .filter_map(|b| {
            let attrs = if b.attributes.is_empty() {
                String::new()
            } else {
                format!("{} ", b.attributes.join(" "))
            };
            let text = format!(
                "There is a {attrs}{} at [{}, {}, {}, {}].",
                b.label,
                b.bbox.x.round(),
                b.bbox.y.round(),
                b.bbox.w.round(),
                b.bbox.h.round()
            );
            ContextSentence::new(&text, Origin::Tree, &b.source)
        })
        .collect()
}

/// Runs the LLM-backed conversions. `attempts` bounds calls per conversion
/// when the reply is unusable; transport errors propagate immediately.
pub struct ContextBuilder<'a> {
    pub llm: &'a dyn ChatModel,
    pub tasks: &'a TaskPrompts,
    pub profile: &'a ModelProfile,
    pub attempts: u32,
}

impl<'a> ContextBuilder<'a> {
    pub fn new(llm: &'a dyn ChatModel, tasks: &'a TaskPrompts, profile: &'a ModelProfile) -> Self {
        Self {
            llm,
            tasks,
            profile,
            attempts: 3,
        }
    }

    fn ask(&self, stage: Stage, prompt: String) -> Result<String, LlmError> {
        let req = self
            .profile
            .request(vec![ChatMessage::user(prompt)], self.profile.judge_temperature, None);
        Ok(self.llm.chat(stage, &req)?.content)
    }

    pub fn qa_to_statement(&self, qa: &QaAnnotation) -> Result<ContextSentence, ContextError> {
        let prompt = fill(
            &self.tasks.qa_single,
            &[("question", &one_line(&qa.question)), ("answer", &one_line(&qa.answer))],
        )?;
        for _ in 0..self.attempts.max(1) {
            let reply = self.ask(Stage::QaConversion, prompt.clone())?;
            if acceptable_statement(&reply) {
                if let Some(s) = ContextSentence::new(&reply, Origin::Qa, &qa.source) {
                    return Ok(s);
                }
            }
        }
        debug!(question = %qa.question, "qa conversion fell back to template");
        Ok(ContextSentence::new(&qa_fallback(qa), Origin::Qa, &qa.source).expect("fallback is non-empty"))
    }

    /// Converts all pairs of an image in one numbered request; any parse
    /// problem with the batch reply degrades to per-item conversion.
    pub fn qa_to_statements(&self, qas: &[QaAnnotation]) -> Result<Vec<ContextSentence>, ContextError> {
        if qas.len() > 1 {
            let pairs = qas
                .iter()
                .enumerate()
                .map(|(i, q)| format!("{}. Q: {} | A: {}", i + 1, one_line(&q.question), one_line(&q.answer)))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = fill(&self.tasks.qa_batch, &[("pairs", &pairs)])?;
            let reply = self.ask(Stage::QaConversion, prompt)?;
            if let Some(out) = parse_batch(&reply, qas) {
                return Ok(out);
            }
            debug!(n = qas.len(), "qa batch reply unusable; converting per item");
        }
        qas.iter().map(|q| self.qa_to_statement(q)).collect()
    }

    pub fn tree_to_description(
        &self,
        ascii: &str,
        image: &ImageRef,
        source: &str,
    ) -> Result<Vec<ContextSentence>, ContextError> {
        if ascii.trim().is_empty() {
            return Ok(Vec::new());
        }
        let size = format!("{}x{}", image.width, image.height);
        let prompt = fill(
            &self.tasks.tree_description,
            &[("tree", ascii.trim_end()), ("image_size", &size)],
        )?;
        for _ in 0..self.attempts.max(1) {
            let reply = self.ask(Stage::TreeDescription, prompt.clone())?;
            let out: Vec<ContextSentence> = split_sentences(&reply)
                .iter()
                .filter_map(|s| ContextSentence::new(s, Origin::Tree, source))
                .collect();
            if !out.is_empty() {
                return Ok(out);
            }
        }
        Err(ContextError::EmptyDescription)
    }

    /// Captions, then tree sentences, then QA statements. With `tree_text`
    /// absent, boxes are listed as plain sentences instead.
    pub fn assemble_context(
        &self,
        bundle: &MetadataBundle,
        tree_text: Option<&str>,
    ) -> Result<ContextSet, ContextError> {
        let mut sentences: Vec<ContextSentence> = bundle
            .captions
            .iter()
            .filter_map(|c| ContextSentence::new(&c.text, Origin::Caption, &c.source))
            .collect();
        match tree_text {
            Some(t) => {
                let sources: BTreeSet<&str> = bundle.boxes.iter().map(|b| b.source.as_str()).collect();
                let source = sources.into_iter().collect::<Vec<_>>().join(",");
                sentences.extend(self.tree_to_description(t, &bundle.image, &source)?);
            }
            None => sentences.extend(boxes_as_sentences(&bundle.boxes)),
        }
        sentences.extend(self.qa_to_statements(&bundle.qas)?);
        Ok(ContextSet::new(bundle.image.clone(), sentences))
    }
}

fn parse_batch(reply: &str, qas: &[QaAnnotation]) -> Option<Vec<ContextSentence>> {
    let mut slots: Vec<Option<String>> = vec![None; qas.len()];
    for line in reply.lines().filter(|l| !l.trim().is_empty()) {
        let c = NUMBERED_LINE.captures(line)?;
        let i: usize = c[1].parse().ok()?;
        let slot = slots.get_mut(i.checked_sub(1)?)?;
        if slot.is_some() || !acceptable_statement(&c[2]) {
            return None;
        }
        *slot = Some(c[2].to_string());
    }
    slots
        .into_iter()
        .zip(qas)
        .map(|(s, q)| ContextSentence::new(&s?, Origin::Qa, &q.source))
        .collect()
}
