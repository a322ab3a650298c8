//! Prompt templates, weighted sampling and conversation parsing.
//!
//! A prompt set is a directory:
//!
//! ```text
//! prompts/<set>/<template_id>.txt     generation templates
//! prompts/<set>/distribution.json     {"<template_id>": weight, ...}
//! prompts/<set>/tasks/<task>.txt      optional task prompt overrides
//! ```
//!
//! A template file may start with `key: value` header lines (`intent`,
//! `requires`) closed by a `---` line. `requires` lists context origins
//! (`caption`, `qa`, `tree`) that must be present for the template to be
//! sampled.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextSentence, ContextSet, Origin};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("no template is compatible with the available context")]
    NoCompatibleTemplate,
    #[error("template `{id}`: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Conversation,
    DetailedDescription,
    ComplexReasoning,
    Custom,
}

impl Intent {
    fn parse(s: &str) -> Option<Intent> {
        match s.trim() {
            "conversation" => Some(Intent::Conversation),
            "detailed_description" => Some(Intent::DetailedDescription),
            "complex_reasoning" => Some(Intent::ComplexReasoning),
            "custom" => Some(Intent::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub intent: Intent,
    pub body: String,
    pub requires: BTreeSet<Origin>,
}

impl PromptTemplate {
    pub fn new(template_id: &str, intent: Intent, body: &str, requires: BTreeSet<Origin>) -> Result<Self, PromptError> {
        if !body.contains("{context}") {
            return Err(PromptError::InvalidTemplate {
                id: template_id.into(),
                reason: "body has no {context} placeholder".into(),
            });
        }
        Ok(Self {
            template_id: template_id.into(),
            intent,
            body: body.into(),
            requires,
        })
    }

    /// Parses a template file with optional header.
    pub fn parse(template_id: &str, text: &str) -> Result<Self, PromptError> {
        let invalid = |reason: String| PromptError::InvalidTemplate {
            id: template_id.into(),
            reason,
        };
        let mut intent = Intent::Custom;
        let mut requires = BTreeSet::new();
        let body = match text.split_once("\n---\n") {
            Some((header, body)) if header.lines().all(|l| l.contains(':') || l.trim().is_empty()) => {
                for line in header.lines().filter(|l| !l.trim().is_empty()) {
                    let (k, v) = line.split_once(':').expect("checked above");
                    match k.trim() {
                        "intent" => {
                            intent =
                                Intent::parse(v).ok_or_else(|| invalid(format!("unknown intent `{}`", v.trim())))?
                        }
                        "requires" => {
                            for o in v.split(',').map(str::trim).filter(|o| !o.is_empty()) {
                                requires.insert(o.parse::<Origin>().map_err(invalid)?);
                            }
                        }
                        other => return Err(invalid(format!("unknown header `{other}`"))),
                    }
                }
                body
            }
            _ => text,
        };
        PromptTemplate::new(template_id, intent, body.trim_end(), requires)
    }

    pub fn is_compatible(&self, origins: &BTreeSet<Origin>) -> bool {
        self.requires.is_subset(origins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDistribution {
    pub entries: Vec<(String, f64)>,
}

impl PromptDistribution {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, PromptError> {
        if entries.is_empty() {
            return Err(PromptError::InvalidDistribution("no entries".into()));
        }
        let mut seen = BTreeSet::new();
        for (id, w) in &entries {
            if !(w.is_finite() && *w > 0.0) {
                return Err(PromptError::InvalidDistribution(format!(
                    "weight of `{id}` must be positive"
                )));
            }
            if !seen.insert(id) {
                return Err(PromptError::InvalidDistribution(format!("duplicate entry `{id}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn single(id: &str) -> Self {
        Self {
            entries: vec![(id.to_string(), 1.0)],
        }
    }
}

/// Prompts for the fixed pipeline tasks. Placeholders per task:
/// `qa_single` {question} {answer}; `qa_batch` {pairs}; `tree_description`
/// {tree} {image_size}; `verify`, `reduce`, `quality` {context} {human}
/// {assistant}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskPrompts {
    pub generation_system: String,
    pub qa_single: String,
    pub qa_batch: String,
    pub tree_description: String,
    pub verify: String,
    pub reduce: String,
    pub quality: String,
}

const TASK_NAMES: [&str; 7] = [
    "generation_system",
    "qa_single",
    "qa_batch",
    "tree_description",
    "verify",
    "reduce",
    "quality",
];

impl TaskPrompts {
    pub fn builtin() -> Self {
        Self {
            generation_system: include_str!("../prompts/builtin/tasks/generation_system.txt")
                .trim_end()
                .into(),
            qa_single: include_str!("../prompts/builtin/tasks/qa_single.txt").trim_end().into(),
            qa_batch: include_str!("../prompts/builtin/tasks/qa_batch.txt").trim_end().into(),
            tree_description: include_str!("../prompts/builtin/tasks/tree_description.txt")
                .trim_end()
                .into(),
            verify: include_str!("../prompts/builtin/tasks/verify.txt").trim_end().into(),
            reduce: include_str!("../prompts/builtin/tasks/reduce.txt").trim_end().into(),
            quality: include_str!("../prompts/builtin/tasks/quality.txt").trim_end().into(),
        }
    }

    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "generation_system" => &mut self.generation_system,
            "qa_single" => &mut self.qa_single,
            "qa_batch" => &mut self.qa_batch,
            "tree_description" => &mut self.tree_description,
            "verify" => &mut self.verify,
            "reduce" => &mut self.reduce,
            "quality" => &mut self.quality,
            _ => unreachable!("unknown task prompt"),
        }
    }
}

const BUILTIN_TEMPLATES: [(&str, &str); 4] = [
    ("conversation", include_str!("../prompts/builtin/conversation.txt")),
    (
        "detailed_description",
        include_str!("../prompts/builtin/detailed_description.txt"),
    ),
    (
        "complex_reasoning",
        include_str!("../prompts/builtin/complex_reasoning.txt"),
    ),
    (
        "spatial_grounding",
        include_str!("../prompts/builtin/spatial_grounding.txt"),
    ),
];

#[derive(Debug, Clone)]
pub struct PromptSet {
    pub name: String,
    templates: BTreeMap<String, PromptTemplate>,
    pub distribution: PromptDistribution,
    pub tasks: TaskPrompts,
}

impl PromptSet {
    pub fn new(
        name: &str,
        templates: Vec<PromptTemplate>,
        distribution: PromptDistribution,
        tasks: TaskPrompts,
    ) -> Result<Self, PromptError> {
        let mut map = BTreeMap::new();
        for t in templates {
            let id = t.template_id.clone();
            if map.insert(id.clone(), t).is_some() {
                return Err(PromptError::InvalidTemplate {
                    id,
                    reason: "duplicate template id".into(),
                });
            }
        }
        if let Some((id, _)) = distribution.entries.iter().find(|(id, _)| !map.contains_key(id)) {
            return Err(PromptError::UnknownTemplate(id.clone()));
        }
        Ok(Self {
            name: name.into(),
            templates: map,
            distribution,
            tasks,
        })
    }

    pub fn builtin() -> Self {
        let templates = BUILTIN_TEMPLATES
            .iter()
            .map(|(id, text)| PromptTemplate::parse(id, text).expect("builtin template"))
            .collect();
        let dist =
            parse_distribution(include_str!("../prompts/builtin/distribution.json")).expect("builtin distribution");
        PromptSet::new("builtin", templates, dist, TaskPrompts::builtin()).expect("builtin prompt set")
    }

    /// Loads `dir` laid out as described in the module docs. Task prompts not
    /// present under `tasks/` keep their builtin text.
    pub fn load(dir: &Path) -> Result<Self, PromptError> {
        let io = |path: &Path, source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        };
        let dist_path = dir.join("distribution.json");
        let dist_text = std::fs::read_to_string(&dist_path).map_err(|e| io(&dist_path, e))?;
        let distribution = parse_distribution(&dist_text)?;
        let mut templates = Vec::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        entries.sort();
        for path in entries {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
            templates.push(PromptTemplate::parse(&id, &text)?);
        }
        let mut tasks = TaskPrompts::builtin();
        for name in TASK_NAMES {
            let p = dir.join("tasks").join(format!("{name}.txt"));
            if p.exists() {
                *tasks.slot(name) = std::fs::read_to_string(&p).map_err(|e| io(&p, e))?.trim_end().into();
            }
        }
        let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("prompts");
        PromptSet::new(name, templates, distribution, tasks)
    }

    pub fn template(&self, id: &str) -> Option<&PromptTemplate> {
        self.templates.get(id)
    }

    pub fn templates(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.values()
    }

    /// Weighted draw among compatible distribution entries, skipping
    /// `exclude`. Exactly one uniform draw is consumed from `rng`.
    pub fn sample_excluding<R: Rng + ?Sized>(
        &self,
        ctx: &ContextSet,
        rng: &mut R,
        exclude: Option<&str>,
    ) -> Result<&PromptTemplate, PromptError> {
        let origins = ctx.origins();
        let candidates: Vec<(&PromptTemplate, f64)> = self
            .distribution
            .entries
            .iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude)
            .filter_map(|(id, w)| self.templates.get(id).map(|t| (t, *w)))
            .filter(|(t, _)| t.is_compatible(&origins))
            .collect();
        let total: f64 = candidates.iter().map(|(_, w)| w).sum();
        if candidates.is_empty() || total <= 0.0 {
            return Err(PromptError::NoCompatibleTemplate);
        }
        let mut x = rng.gen::<f64>() * total;
        for (t, w) in &candidates {
            if x < *w {
                return Ok(t);
            }
            x -= w;
        }
        Ok(candidates.last().expect("non-empty").0)
    }
}

pub fn parse_distribution(json: &str) -> Result<PromptDistribution, PromptError> {
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(json).map_err(|e| PromptError::InvalidDistribution(e.to_string()))?;
    let entries = map
        .into_iter()
        .map(|(k, v)| match v.as_f64() {
            Some(w) => Ok((k, w)),
            None => Err(PromptError::InvalidDistribution(format!(
                "weight of `{k}` is not a number"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    PromptDistribution::new(entries)
}

pub fn sample_template<'a, R: Rng + ?Sized>(
    set: &'a PromptSet,
    ctx: &ContextSet,
    rng: &mut R,
) -> Result<&'a PromptTemplate, PromptError> {
    set.sample_excluding(ctx, rng, None)
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

/// Single-pass placeholder substitution; substituted values are not
/// rescanned. Any placeholder without a value is an error.
pub fn fill(text: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for c in PLACEHOLDER.captures_iter(text) {
        let m = c.get(0).expect("whole match");
        let name = &c[1];
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(&text[last..m.start()]);
        out.push_str(value);
        last = m.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// `1. first`, `2. second`, one per line.
pub fn numbered(sentences: &[ContextSentence]) -> String {
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render(template: &PromptTemplate, ctx: &ContextSet) -> Result<String, PromptError> {
    let size = format!("{}x{}", ctx.image.width, ctx.image.height);
    fill(
        &template.body,
        &[("context", &numbered(&ctx.sentences)), ("image_size", &size)],
    )
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?mi)^[ \t]*\**[ \t]*(human|question|user|assistant|answer|gpt)[ \t]*\**[ \t]*:\**").unwrap()
});

/// Extracts (human, assistant) pairs. Markers are matched case-insensitively
/// at line start: `Human:`, `Question:`, `User:` open a human block and
/// `Assistant:`, `Answer:`, `GPT:` an assistant block. A human block followed
/// by another human block is superseded; assistant blocks without a pending
/// human block and a trailing unanswered human block are dropped.
pub fn parse_conversation(raw: &str) -> Vec<(String, String)> {
    let marks: Vec<(usize, usize, bool)> = MARKER
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            let human = matches!(c[1].to_ascii_lowercase().as_str(), "human" | "question" | "user");
            (m.start(), m.end(), human)
        })
        .collect();
    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for (i, &(_, body_start, human)) in marks.iter().enumerate() {
        let body_end = marks.get(i + 1).map_or(raw.len(), |m| m.0);
        let text = raw[body_start..body_end].trim().to_string();
        if human {
            pending = (!text.is_empty()).then_some(text);
        } else if let Some(h) = pending.take() {
            if !text.is_empty() {
                pairs.push((h, text));
            }
        }
    }
    pairs
}

pub fn format_conversation(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(h, a)| format!("Human: {h}\nAssistant: {a}"))
        .collect::<Vec<_>>()
        .join("\n")
}
