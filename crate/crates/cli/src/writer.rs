//! Conversation records and append-only shard output files.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id": "...", "image": "<uri>",
//!  "conversations": [{"from": "human", "value": "<image>\n..."}, {"from": "gpt", "value": "..."}],
//!  "provenance": {...}}
//! ```

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use scenechat_core::generation::Provenance;
use scenechat_core::{Conversation, ImageRef, Turn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::warn;

pub const IMAGE_TOKEN: &str = "<image>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnMeta {
    pub template_id: String,
    pub iteration: u32,
    pub attempts: u32,
    pub verified: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordProvenance {
    pub link_key: String,
    pub source: ImageRef,
    pub turns: Vec<TurnMeta>,
    #[serde(flatten)]
    pub generation: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub image: String,
    pub conversations: Vec<Message>,
    pub provenance: RecordProvenance,
}

/// Stable id: link key plus the per-image generation seed.
pub fn conversation_id(link_key: &str, seed: u64) -> String {
    format!("{link_key}#{seed:016x}")
}

fn scrub(text: &str) -> String {
    text.replace(IMAGE_TOKEN, "image")
}

pub fn to_record(conv: &Conversation, link_key: &str) -> ConversationRecord {
    let mut conversations = Vec::with_capacity(conv.turns.len() * 2);
    for (i, t) in conv.turns.iter().enumerate() {
        let human = scrub(&t.human);
        conversations.push(Message {
            from: "human".into(),
            value: if i == 0 {
                format!("{IMAGE_TOKEN}\n{human}")
            } else {
                human
            },
        });
        conversations.push(Message {
            from: "gpt".into(),
            value: scrub(&t.assistant),
        });
    }
    ConversationRecord {
        id: conversation_id(link_key, conv.provenance.seed),
        image: conv.image.uri.clone(),
        conversations,
        provenance: RecordProvenance {
            link_key: link_key.to_string(),
            source: conv.image.clone(),
            turns: conv
                .turns
                .iter()
                .map(|t| TurnMeta {
                    template_id: t.template_id.clone(),
                    iteration: t.iteration,
                    attempts: t.attempts,
                    verified: t.verified,
                })
                .collect(),
            generation: conv.provenance.clone(),
        },
    }
}

pub fn from_record(rec: &ConversationRecord) -> Result<Conversation, String> {
    let pairs = rec.conversations.chunks(2);
    if !rec.conversations.len().is_multiple_of(2) || rec.conversations.len() / 2 != rec.provenance.turns.len() {
        return Err("conversation length does not match turn metadata".into());
    }
    let turns = pairs
        .zip(&rec.provenance.turns)
        .enumerate()
        .map(|(i, (pair, meta))| {
            let human = if i == 0 {
                pair[0]
                    .value
                    .strip_prefix(&format!("{IMAGE_TOKEN}\n"))
                    .ok_or("first human turn lacks the image token")?
                    .to_string()
            } else {
                pair[0].value.clone()
            };
            Ok(Turn {
                human,
                assistant: pair[1].value.clone(),
                template_id: meta.template_id.clone(),
                iteration: meta.iteration,
                attempts: meta.attempts,
                verified: meta.verified,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(Conversation {
        image: rec.provenance.source.clone(),
        turns,
        provenance: rec.provenance.generation.clone(),
    })
}

/// Appends one record as a JSON line and flushes.
pub fn write_conversation(conv: &Conversation, link_key: &str, out: &mut impl Write) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(&to_record(conv, link_key))?;
    line.push(b'\n');
    out.write_all(&line)?;
    out.flush()
}

/// Schema check for one output line. Returns every violation found.
pub fn validate_record(v: &Value) -> Vec<String> {
    let mut errs = Vec::new();
    let Some(obj) = v.as_object() else {
        return vec!["record is not an object".into()];
    };
    for k in obj.keys() {
        if !matches!(k.as_str(), "id" | "image" | "conversations" | "provenance") {
            errs.push(format!("unexpected field `{k}`"));
        }
    }
    for k in ["id", "image"] {
        if !obj.get(k).and_then(Value::as_str).is_some_and(|s| !s.is_empty()) {
            errs.push(format!("`{k}` must be a non-empty string"));
        }
    }
    let convs = match obj.get("conversations").and_then(Value::as_array) {
        Some(c) => c,
        None => {
            errs.push("`conversations` must be an array".into());
            return errs;
        }
    };
    if convs.len() < 2 || convs.len() % 2 != 0 {
        errs.push(format!(
            "`conversations` has {} entries; need a positive even count",
            convs.len()
        ));
    }
    let mut tokens = 0;
    for (i, m) in convs.iter().enumerate() {
        let want = if i % 2 == 0 { "human" } else { "gpt" };
        if m.get("from").and_then(Value::as_str) != Some(want) {
            errs.push(format!("entry {i}: `from` must be `{want}`"));
        }
        match m.get("value").and_then(Value::as_str) {
            Some(s) if !s.trim().is_empty() => {
                tokens += s.matches(IMAGE_TOKEN).count();
                if i == 0 && !s.starts_with(&format!("{IMAGE_TOKEN}\n")) {
                    errs.push("entry 0 must start with the image token".into());
                }
            }
            _ => errs.push(format!("entry {i}: `value` must be a non-empty string")),
        }
        if m.as_object().is_some_and(|o| o.len() != 2) {
            errs.push(format!("entry {i}: only `from` and `value` are allowed"));
        }
    }
    if tokens != 1 {
        errs.push(format!("image token appears {tokens} times; expected exactly once"));
    }
    match obj.get("provenance").and_then(Value::as_object) {
        None => errs.push("`provenance` must be an object".into()),
        Some(p) => {
            if !p.get("link_key").is_some_and(Value::is_string) {
                errs.push("provenance.link_key must be a string".into());
            }
            match p.get("turns").and_then(Value::as_array) {
                Some(t) if t.len() * 2 == convs.len() => {}
                _ => errs.push("provenance.turns must have one entry per turn".into()),
            }
            let chars = |k: &str| p.get(k).and_then(Value::as_u64);
            match (chars("context_chars_initial"), chars("context_chars_final")) {
                (Some(a), Some(b)) if b <= a => {}
                _ => errs.push("provenance context chars missing or increasing".into()),
            }
            for k in ["seed", "retries_total", "filtered_turns"] {
                if chars(k).is_none() {
                    errs.push(format!("provenance.{k} must be an unsigned integer"));
                }
            }
            if !p.get("templates_used").is_some_and(Value::is_array) {
                errs.push("provenance.templates_used must be an array".into());
            }
        }
    }
    errs
}

/// Append-only writer for one shard's conversations.
///
/// Opening an existing file recovers from a crash mid-write: a trailing
/// partial line is cut off and the ids of complete records are loaded so
/// they are skipped on resume.
pub struct ShardWriter {
    file: File,
    path: PathBuf,
    ids: HashSet<String>,
    appended: u64,
}

#[derive(Deserialize)]
struct IdOnly {
    id: String,
}

impl ShardWriter {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let keep = buf.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut ids = HashSet::new();
        let mut good = 0;
        for line in buf[..keep].split_inclusive(|&b| b == b'\n') {
            match serde_json::from_slice::<IdOnly>(line) {
                Ok(r) => {
                    ids.insert(r.id);
                    good += line.len();
                }
                Err(_) => break,
            }
        }
        if good < buf.len() {
            warn!(path = %path.display(), dropped = buf.len() - good, "truncating incomplete output tail");
            file.set_len(good as u64)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            ids,
            appended: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn completed(&self) -> usize {
        self.ids.len()
    }

    pub fn appended(&self) -> u64 {
        self.appended
    }

    /// Writes the record unless its id is already present.
    pub fn append(&mut self, rec: &ConversationRecord) -> std::io::Result<bool> {
        if self.ids.contains(&rec.id) {
            return Ok(false);
        }
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.ids.insert(rec.id.clone());
        self.appended += 1;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scenechat_core::generation::StopReason;

    pub(crate) fn sample(turns: usize) -> Conversation {
        Conversation {
            image: ImageRef::new("coco", "7", "images/7.jpg", 640, 480),
            turns: (0..turns)
                .map(|i| Turn {
                    human: format!("Question {i}?"),
                    assistant: format!("Answer {i}."),
                    template_id: "conversation".into(),
                    iteration: i as u32,
                    attempts: 1,
                    verified: Some(true),
                })
                .collect(),
            provenance: Provenance {
                seed: 42,
                context_chars_initial: 900,
                context_chars_final: 80,
                context_sentences_initial: 9,
                context_sentences_final: 1,
                templates_used: vec!["conversation".into(); turns],
                retries_total: 0,
                verification_failures: 0,
                filtered_turns: 0,
                abandoned_iterations: 0,
                iterations: turns as u32,
                quality: vec![],
                stop_reason: StopReason::ContextExhausted,
                tree: Some("dog center=(1, 1)".into()),
            },
        }
    }

    #[test]
    fn two_turns_four_entries() {
        let rec = to_record(&sample(2), "file-stem:7");
        assert_eq!(rec.conversations.len(), 4);
        assert!(rec.conversations[0].value.starts_with("<image>\n"));
        assert!(rec.conversations[1..].iter().all(|m| !m.value.contains(IMAGE_TOKEN)));
        let v = serde_json::to_value(&rec).unwrap();
        assert!(validate_record(&v).is_empty(), "{:?}", validate_record(&v));
    }

    #[test]
    fn round_trip() {
        let conv = sample(3);
        let mut buf = Vec::new();
        write_conversation(&conv, "k", &mut buf).unwrap();
        let rec: ConversationRecord = serde_json::from_slice(&buf).unwrap();
        assert_eq!(from_record(&rec).unwrap(), conv);
    }

    #[test]
    fn stray_image_tokens_are_scrubbed() {
        let mut conv = sample(1);
        conv.turns[0].assistant = "The <image> shows a dog.".into();
        let v = serde_json::to_value(to_record(&conv, "k")).unwrap();
        assert!(validate_record(&v).is_empty());
    }

    #[test]
    fn schema_violations_are_reported() {
        let mut v = serde_json::to_value(to_record(&sample(1), "k")).unwrap();
        v["conversations"][1]["value"] = "<image> again".into();
        v["extra"] = 1.into();
        let errs = validate_record(&v);
        assert!(errs.iter().any(|e| e.contains("2 times")));
        assert!(errs.iter().any(|e| e.contains("extra")));
    }

    #[test]
    fn reopen_skips_written_ids_and_cuts_partial_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let rec = to_record(&sample(1), "a");
        {
            let mut w = ShardWriter::open(&path).unwrap();
            assert!(w.append(&rec).unwrap());
            assert!(!w.append(&rec).unwrap());
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"id\": \"half").unwrap();
        drop(f);
        let mut w = ShardWriter::open(&path).unwrap();
        assert!(w.contains(&rec.id));
        let mut other = rec.clone();
        other.id = "b".into();
        assert!(w.append(&other).unwrap());
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    }
}
