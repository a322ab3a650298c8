//! Efficiency table over a synthetic corpus with a scripted LLM.
//!
//! Every variant runs the real worker over the same grouped manifest. The
//! scripted backend sleeps a fixed latency per call, so wall time tracks the
//! number and concurrency of LLM calls. Mask and depth sidecar computation
//! is simulated by a per-image delay when bbox conversion is on.

use std::path::PathBuf;
use std::time::Instant;

use scenechat_core::metadata::MetadataBundle;
use scenechat_core::ReductionMode;
use scenechat_gateway::Mode;
use serde::Serialize;
use tracing::info;

use crate::config::{Features, PipelineConfig};
use crate::corpus::write_corpus;
use crate::layout::Layout;
use crate::pipeline::{Engine, RunError};
use crate::run::{run_worker, RunOptions};
use crate::shard::{ingest, plan_shards, ManifestReader};

/// Time of the sidecar-only row relative to direct generation in the
/// published efficiency table (396 s against 50 s).
pub const PUBLISHED_SIDECAR_RATIO: f64 = 396.0 / 50.0;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub images: usize,
    pub seed: u64,
    pub latency_ms: u64,
    pub parallelism: usize,
    pub max_in_flight: usize,
    /// Fixed sidecar delay per image. When unset, it is derived from the
    /// measured direct-generation time and `sidecar_ratio`.
    pub sidecar_ms: Option<u64>,
    pub sidecar_ratio: f64,
    pub reduction: ReductionMode,
    pub work_dir: Option<PathBuf>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            images: 500,
            seed: 7,
            latency_ms: 3,
            parallelism: 8,
            max_in_flight: 8,
            sidecar_ms: None,
            sidecar_ratio: PUBLISHED_SIDECAR_RATIO,
            reduction: ReductionMode::Lexical,
            work_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub features: Features,
    pub secs: f64,
    pub images: u64,
    pub conversations: u64,
    pub turns: u64,
    pub failures: u64,
    pub llm_calls: u64,
    /// Conversations per hour, or images per hour for the sidecar-only row.
    pub per_hour: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub images: usize,
    pub latency_ms: u64,
    pub sidecar_ms: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, variant: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    fn ratio(&self, variant: &str) -> f64 {
        match (self.row(variant), self.row("Direct Generation")) {
            (Some(v), Some(d)) if d.secs > 0.0 => v.secs / d.secs,
            _ => f64::NAN,
        }
    }

    pub fn reduction_ratio(&self) -> f64 {
        self.ratio("+Reduction")
    }

    pub fn bbox_ratio(&self) -> f64 {
        self.ratio("+BBox")
    }

    pub fn to_markdown(&self) -> String {
        let tick = |b: bool| if b { "x" } else { " " };
        let mut s = String::from(
            "| Variant | Filtering | BBox | Reduction | Time (s) | Throughput |\n|---|:-:|:-:|:-:|--:|--:|\n",
        );
        for r in &self.rows {
            let unit = if r.conversations == 0 { "imgs/hour" } else { "conv/hour" };
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} | {:.0} {} |\n",
                r.variant,
                tick(r.features.filtering),
                tick(r.features.bbox_conversion),
                tick(r.features.reduction),
                r.secs,
                r.per_hour,
                unit
            ));
        }
        s.push_str(&format!(
            "\n{} images, {} ms per LLM call, {} ms simulated sidecar per image.\n+Reduction / direct = {:.3}, +BBox / direct = {:.2}\n",
            self.images,
            self.latency_ms,
            self.sidecar_ms,
            self.reduction_ratio(),
            self.bbox_ratio()
        ));
        s
    }
}

fn config(opts: &BenchOptions, features: Features, sidecar_ms: u64, out: PathBuf) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        features,
        parallelism: opts.parallelism,
        sidecar_delay_ms: sidecar_ms,
        output_dir: out,
        rng_seed: opts.seed,
        ..Default::default()
    };
    cfg.gateway.mode = Mode::Scripted;
    cfg.gateway.max_in_flight = opts.max_in_flight;
    cfg.scripted.latency_ms = opts.latency_ms;
    cfg.generation.reduction = opts.reduction;
    cfg
}

fn run_variant(
    opts: &BenchOptions,
    root: &Layout,
    name: &str,
    features: Features,
    sidecar_ms: u64,
) -> Result<BenchRow, RunError> {
    let dir = root.root().join(name.replace(['+', ' ', '/'], "_"));
    let layout = Layout::new(&dir);
    std::fs::create_dir_all(&dir)?;
    std::fs::copy(root.manifest(), layout.manifest())?;
    plan_shards(&layout, 1)?;
    let engine = Engine::new(config(opts, features, sidecar_ms, dir.clone()))?;
    let started = Instant::now();
    let s = run_worker(&engine, &layout, "bench", &RunOptions::default())?;
    let secs = started.elapsed().as_secs_f64();
    info!(
        variant = name,
        secs,
        conversations = s.conversations,
        "bench variant done"
    );
    Ok(BenchRow {
        variant: name.into(),
        features,
        secs,
        images: s.images,
        conversations: s.conversations,
        turns: s.turns,
        failures: s.failures,
        llm_calls: engine.gateway.metrics().total().calls,
        per_hour: s.conversations as f64 * 3600.0 / secs,
    })
}

/// Sidecar computation alone: tree building plus the simulated delay.
fn sidecar_only(opts: &BenchOptions, root: &Layout, sidecar_ms: u64) -> Result<BenchRow, RunError> {
    let features = Features {
        bbox_conversion: true,
        ..Features::NONE
    };
    let engine = Engine::new(config(opts, features, sidecar_ms, root.root().to_path_buf()))?;
    let bundles: Vec<MetadataBundle> = ManifestReader::read_all(&root.manifest())?
        .into_iter()
        .filter_map(|r| r.record.into_bundle().ok().map(|(b, _)| b))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let started = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..opts.parallelism.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(b) = bundles.get(i) else { break };
                std::hint::black_box(engine.tree_text(b));
            });
        }
    });
    let secs = started.elapsed().as_secs_f64();
    Ok(BenchRow {
        variant: "BBox Sidecar Only".into(),
        features,
        secs,
        images: bundles.len() as u64,
        conversations: 0,
        turns: 0,
        failures: 0,
        llm_calls: 0,
        per_hour: bundles.len() as f64 * 3600.0 / secs,
    })
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport, RunError> {
    let tmp;
    let root_dir = match &opts.work_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let corpus = write_corpus(&root_dir.join("corpus"), opts.images, opts.seed)?;
    let root = Layout::new(root_dir.join("grouped"));
    ingest(&corpus, &root)?;

    let direct = run_variant(opts, &root, "Direct Generation", Features::NONE, 0)?;
    let sidecar_ms = opts.sidecar_ms.unwrap_or_else(|| {
        let per_image = direct.secs * opts.parallelism.max(1) as f64 / opts.images.max(1) as f64;
        (per_image * opts.sidecar_ratio * 1000.0).round() as u64
    });
    let f = |filtering, bbox_conversion, reduction| Features {
        filtering,
        bbox_conversion,
        reduction,
    };
    let mut rows = vec![direct];
    rows.push(run_variant(opts, &root, "+Filtering", f(true, false, false), 0)?);
    rows.push(run_variant(opts, &root, "+BBox", f(false, true, false), sidecar_ms)?);
    rows.push(run_variant(opts, &root, "+Reduction", f(false, false, true), 0)?);
    rows.push(sidecar_only(opts, &root, sidecar_ms)?);
    rows.push(run_variant(opts, &root, "Full Processing", Features::ALL, sidecar_ms)?);
    Ok(BenchReport {
        images: opts.images,
        latency_ms: opts.latency_ms,
        sidecar_ms,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_bench_has_all_rows() {
        let r = run_bench(&BenchOptions {
            images: 12,
            latency_ms: 0,
            parallelism: 4,
            sidecar_ms: Some(1),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.rows.len(), 6);
        let direct = r.row("Direct Generation").unwrap();
        assert_eq!(direct.conversations + direct.failures, 12);
        assert!(r.to_markdown().contains("| +BBox |"));
    }
}
