//! Rule-based stand-in for an instruction-following model.
//!
//! It understands the builtin task prompts well enough to produce
//! well-formed, context-grounded replies, which keeps offline runs, tests and
//! the throughput bench deterministic. Replies are a pure function of the
//! prompt text.

use std::sync::LazyLock;

use regex::Regex;

use super::{ChatMessage, Role, Stage};

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^(\d+)\. (.+)$").unwrap());
static QA_PAIR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^(\d+)\. Q: (.*?) \| A: (.*)$").unwrap());

fn last_user(messages: &[ChatMessage]) -> &str {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

/// Guesses the stage from the wording of the builtin task prompts.
pub fn infer_stage(messages: &[ChatMessage]) -> Option<Stage> {
    let text = last_user(messages);
    let rules = [
        ("Scene tree:", Stage::TreeDescription),
        ("Which numbered facts", Stage::Reduction),
        ("Is every statement", Stage::Verification),
        ("Judge this conversation turn", Stage::Quality),
        ("Rewrite each numbered", Stage::QaConversion),
        ("Rewrite the question", Stage::QaConversion),
        ("Human: <", Stage::Generation),
    ];
    rules
        .into_iter()
        .find(|(needle, _)| text.contains(needle))
        .map(|(_, s)| s)
}

pub fn respond(stage: Stage, messages: &[ChatMessage]) -> String {
    let text = last_user(messages);
    match stage {
        Stage::QaConversion => qa_reply(text),
        Stage::TreeDescription => tree_reply(text),
        Stage::Generation => generation_reply(text),
        Stage::Verification => "yes".into(),
        Stage::Reduction => reduction_reply(text),
        Stage::Quality => "keep".into(),
    }
}

fn numbered_facts(text: &str) -> Vec<(usize, String)> {
    NUMBERED
        .captures_iter(text)
        .filter_map(|c| Some((c[1].parse().ok()?, c[2].trim().to_string())))
        .collect()
}

/// Declarative rewrite of one question/answer pair.
pub fn statement_for(question: &str, answer: &str) -> String {
    let q = question.trim().trim_end_matches('?').trim();
    let a = answer.trim().trim_end_matches('.');
    let lower = q.to_lowercase();
    let al = a.to_lowercase();
    for prefix in ["what color is the ", "what colour is the ", "what color are the "] {
        if let Some(obj) = lower.strip_prefix(prefix) {
            let verb = if prefix.contains(" are ") { "are" } else { "is a" };
            return format!("There {verb} {al} {obj} in the image.");
        }
    }
    if let Some(rest) = lower.strip_prefix("how many ") {
        let obj = rest
            .split(" are ")
            .next()
            .unwrap_or(rest)
            .split(" is ")
            .next()
            .unwrap_or(rest);
        return format!("There are {al} {obj} in the image.");
    }
    for prefix in ["is there a ", "is there an "] {
        if let Some(obj) = lower.strip_prefix(prefix) {
            let article = prefix.trim_start_matches("is there ").trim();
            return match al.as_str() {
                "no" => format!("There is no {obj} in the image."),
                _ => format!("There is {article} {obj} in the image."),
            };
        }
    }
    format!("For the question \"{q}\", the image shows: {a}.")
}

fn qa_reply(text: &str) -> String {
    let batch: Vec<String> = QA_PAIR
        .captures_iter(text)
        .map(|c| format!("{}. {}", &c[1], statement_for(&c[2], &c[3])))
        .collect();
    if !batch.is_empty() {
        return batch.join("\n");
    }
    let field = |tag: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(tag))
            .unwrap_or("")
            .trim()
            .to_string()
    };
    statement_for(&field("Q: "), &field("A: "))
}

fn article(word: &str) -> &'static str {
    match word.chars().next() {
        Some(c) if "aeiouAEIOU".contains(c) => "an",
        _ => "a",
    }
}

fn place(pos: &str) -> String {
    match pos {
        "center" => "near the center of the image".into(),
        p => format!("at the {p} of the image"),
    }
}

fn tree_reply(text: &str) -> String {
    let Some((_, tree)) = text.split_once("Scene tree:\n") else {
        return String::new();
    };
    let mut parents: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for line in tree.lines().filter(|l| !l.trim().is_empty()) {
        let level = (line.len() - line.trim_start().len()) / 2;
        let line = line.trim();
        let Some((head, rest)) = line.split_once(" center=(") else {
            continue;
        };
        let pos = rest
            .split_whitespace()
            .find_map(|t| t.strip_prefix("pos="))
            .unwrap_or("center");
        parents.truncate(level);
        let within = parents.last().map(|p| format!(" within {p}")).unwrap_or_default();
        let (sentence, name) = if rest.contains("avg_size=") {
            (
                format!("There are {head}{within} {}.", place(pos)),
                format!("the group of {head}"),
            )
        } else {
            let (label, attrs) = match head.split_once(" [") {
                Some((l, a)) => (l, a.trim_end_matches(']').replace(", ", " ")),
                None => (head, String::new()),
            };
            let noun = if attrs.is_empty() {
                label.to_string()
            } else {
                format!("{attrs} {label}")
            };
            (
                format!("There is {} {noun}{within} {}.", article(&noun), place(pos)),
                format!("the {label}"),
            )
        };
        out.push(sentence);
        parents.push(name);
    }
    out.join("\n")
}

const QUESTIONS: [&str; 4] = [
    "What can you see in this image?",
    "Can you describe this part of the scene?",
    "What stands out in the image?",
    "What else is visible here?",
];

fn generation_reply(text: &str) -> String {
    let facts = numbered_facts(text);
    if facts.is_empty() {
        return "Human: What is in the image?\nAssistant: I cannot tell from the description.".into();
    }
    let take = facts.len().div_ceil(3);
    let q = QUESTIONS[facts[0].1.len() % QUESTIONS.len()];
    let answer: Vec<&str> = facts[..take].iter().map(|(_, s)| s.as_str()).collect();
    format!("Human: {q}\nAssistant: {}", answer.join(" "))
}

fn reduction_reply(text: &str) -> String {
    let (facts_part, turn) = match text.split_once("Conversation turn:") {
        Some(parts) => parts,
        None => return "none".into(),
    };
    let covered: Vec<String> = numbered_facts(facts_part)
        .into_iter()
        .filter(|(_, s)| turn.contains(s.as_str()))
        .map(|(i, _)| i.to_string())
        .collect();
    if covered.is_empty() {
        "none".into()
    } else {
        covered.join(", ")
    }
}
