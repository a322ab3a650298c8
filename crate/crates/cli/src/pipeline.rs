//! Per-image pipeline: bundle, optional scene tree, context, conversation.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use scenechat_core::generation::GenError;
use scenechat_core::llm::ScriptBook;
use scenechat_core::metadata::MetadataBundle;
use scenechat_core::scene::{scene_from_boxes, serialize_tree};
use scenechat_core::{ContextBuilder, GenerationParams, Generator, PromptSet};
use scenechat_gateway::{Gateway, ScriptedServer, ServerOptions};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig};
use crate::shard::GroupedRecord;
use crate::writer::{to_record, ConversationRecord};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("LLM endpoint unreachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Ingest(#[from] scenechat_core::ingestion::IngestError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker stopped after {0} records")]
    Crashed(u64),
}

/// Stage names used in timings and `errors.jsonl`.
pub const STAGES: [&str; 5] = ["ingest", "scene_tree", "context", "generation", "write"];

/// Summed per-stage time across worker threads.
#[derive(Debug, Default)]
pub struct StageTimes {
    nanos: [AtomicU64; 5],
}

impl StageTimes {
    pub fn add(&self, stage: usize, d: Duration) {
        self.nanos[stage].fetch_add(d.as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn seconds(&self) -> BTreeMap<String, f64> {
        STAGES
            .iter()
            .zip(&self.nanos)
            .map(|(s, n)| (s.to_string(), n.load(Ordering::Relaxed) as f64 / 1e9))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFailure {
    pub stage: &'static str,
    pub reason: String,
}

impl ImageFailure {
    fn at(stage: &'static str, reason: impl ToString) -> Self {
        Self {
            stage,
            reason: reason.to_string(),
        }
    }
}

/// Everything one worker needs to turn grouped records into conversations.
pub struct Engine {
    pub cfg: PipelineConfig,
    pub generation: GenerationParams,
    pub prompts: PromptSet,
    pub gateway: Arc<Gateway>,
    server: Option<ScriptedServer>,
}

impl Engine {
    /// Builds the gateway for the configured mode. Live endpoints are probed
    /// once; failure is [`RunError::Unreachable`].
    pub fn new(cfg: PipelineConfig) -> Result<Self, RunError> {
        let mut server = None;
        let gateway = if cfg.is_scripted() {
            let mut book = ScriptBook::new(cfg.scripted.fallback).with_faults(cfg.scripted.faults);
            if let Some(f) = &cfg.scripted.fixtures {
                book.load_fixtures(f)
                    .map_err(|e| ConfigError::new(format!("{}: {e}", f.display())))?;
            }
            let latency = Duration::from_millis(cfg.scripted.latency_ms);
            if cfg.scripted.over_http {
                let s = ScriptedServer::start(
                    Arc::new(book),
                    ServerOptions {
                        latency,
                        worker_threads: None,
                    },
                )?;
                let mut g = cfg.gateway.clone();
                g.endpoint_url = s.url();
                server = Some(s);
                Gateway::http(g).map_err(ConfigError::new)?
            } else {
                Gateway::in_process(cfg.gateway.clone(), Arc::new(book), latency).map_err(ConfigError::new)?
            }
        } else {
            let g = Gateway::http(cfg.gateway.clone()).map_err(ConfigError::new)?;
            g.probe()
                .map_err(|e| RunError::Unreachable(format!("{}: {e}", cfg.gateway.endpoint_url)))?;
            g
        };
        Self::with_gateway(cfg, gateway).map(|mut e| {
            e.server = server;
            e
        })
    }

    /// Uses a caller-built gateway, for tests with custom transports.
    pub fn with_gateway(cfg: PipelineConfig, gateway: Gateway) -> Result<Self, RunError> {
        let prompts = if cfg.prompts_set == "builtin" {
            PromptSet::builtin()
        } else {
            PromptSet::load(Path::new(&cfg.prompts_set)).map_err(|e| ConfigError::new(e.to_string()))?
        };
        Ok(Self {
            generation: cfg.effective_generation(),
            cfg,
            prompts,
            gateway: Arc::new(gateway),
            server: None,
        })
    }

    pub fn server(&self) -> Option<&ScriptedServer> {
        self.server.as_ref()
    }

    /// Per-image generation seed derived from the run seed and link key.
    pub fn image_seed(&self, link_key: &str) -> u64 {
        image_seed(self.cfg.rng_seed, link_key)
    }

    /// Scene tree text for a bundle, or `None` when bbox conversion is off
    /// or there are no boxes.
    pub fn tree_text(&self, bundle: &MetadataBundle) -> Option<String> {
        if !self.cfg.features.bbox_conversion || bundle.boxes.is_empty() {
            return None;
        }
        if self.cfg.sidecar_delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.cfg.sidecar_delay_ms));
        }
        let tree = scene_from_boxes(&bundle.boxes, &self.cfg.scene);
        Some(serialize_tree(&tree, &bundle.image))
    }

    /// Runs one grouped record through every stage.
    pub fn process(&self, rec: GroupedRecord, times: &StageTimes) -> Result<ConversationRecord, ImageFailure> {
        let t = Instant::now();
        let key = rec.link_key;
        let (bundle, _) = rec.record.into_bundle().map_err(|e| ImageFailure::at("ingest", e))?;
        times.add(0, t.elapsed());

        let t = Instant::now();
        let tree = self.tree_text(&bundle);
        times.add(1, t.elapsed());

        let t = Instant::now();
        let llm: &dyn scenechat_core::ChatModel = &*self.gateway;
        let builder = ContextBuilder::new(llm, &self.prompts.tasks, &self.cfg.model);
        let ctx = builder
            .assemble_context(&bundle, tree.as_deref())
            .map_err(|e| ImageFailure::at("context", e))?;
        times.add(2, t.elapsed());

        let t = Instant::now();
        let generator = Generator::new(llm, &self.prompts, &self.cfg.model, &self.generation);
        let seed = self.image_seed(&key);
        let conv = generator
            .generate_conversation_with_tree(&ctx, seed, tree)
            .map_err(|e| match e {
                GenError::Prompt(p) => ImageFailure::at("prompt", p),
                other => ImageFailure::at("generation", other),
            })?;
        times.add(3, t.elapsed());
        Ok(to_record(&conv, &key))
    }
}

pub fn image_seed(rng_seed: u64, link_key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    h.update(link_key.as_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Features;
    use scenechat_core::metadata::{BBox, BoxRecord, CaptionAnnotation, ManifestRecord};
    use scenechat_gateway::Mode;

    fn engine(features: Features) -> Engine {
        let mut cfg = PipelineConfig {
            features,
            ..Default::default()
        };
        cfg.gateway.mode = Mode::Scripted;
        Engine::new(cfg).unwrap()
    }

    fn record() -> GroupedRecord {
        GroupedRecord {
            link_key: "file-stem:img_1".into(),
            record: ManifestRecord {
                dataset: "d".into(),
                image_id: "1".into(),
                uri: "img_1.jpg".into(),
                width: 640,
                height: 480,
                captions: vec![CaptionAnnotation {
                    text: "A brown dog sleeps on a red sofa next to a window in a bright living room.".into(),
                    source: "c".into(),
                }],
                boxes: vec![
                    BoxRecord {
                        label: "sofa".into(),
                        bbox: BBox::new(100.0, 200.0, 400.0, 200.0),
                        attributes: vec!["red".into()],
                        mask_rle: None,
                        depth_mean: Some(0.5),
                        source: "b".into(),
                    },
                    BoxRecord {
                        label: "dog".into(),
                        bbox: BBox::new(150.0, 250.0, 80.0, 60.0),
                        attributes: vec!["brown".into()],
                        mask_rle: None,
                        depth_mean: None,
                        source: "b".into(),
                    },
                ],
                qas: vec![],
            },
        }
    }

    #[test]
    fn full_features_produce_a_tree_and_verified_turns() {
        let e = engine(Features::ALL);
        let times = StageTimes::default();
        let rec = e.process(record(), &times).unwrap();
        let tree = rec.provenance.generation.tree.as_deref().unwrap();
        assert!(tree.contains("sofa [red]"), "{tree}");
        assert!(tree.contains("\n  dog [brown]"), "{tree}");
        assert!(rec.provenance.turns.iter().all(|t| t.verified == Some(true)));
        assert!(times.seconds()["generation"] > 0.0);
    }

    #[test]
    fn direct_generation_lists_boxes_plainly() {
        let e = engine(Features::NONE);
        let rec = e.process(record(), &StageTimes::default()).unwrap();
        assert!(rec.provenance.generation.tree.is_none());
        assert!(rec.provenance.turns.iter().all(|t| t.verified.is_none()));
        assert!(rec.provenance.generation.quality.is_empty());
    }

    #[test]
    fn seeds_depend_on_run_seed_and_key() {
        assert_eq!(image_seed(1, "a"), image_seed(1, "a"));
        assert_ne!(image_seed(1, "a"), image_seed(2, "a"));
        assert_ne!(image_seed(1, "a"), image_seed(1, "b"));
    }

    #[test]
    fn tiny_context_is_a_generation_failure() {
        let e = engine(Features::NONE);
        let mut r = record();
        r.record.boxes.clear();
        r.record.captions[0].text = "A dog.".into();
        let f = e.process(r, &StageTimes::default()).unwrap_err();
        assert_eq!(f.stage, "generation");
    }
}
