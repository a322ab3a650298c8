use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use scenechat::bench::{run_bench, BenchOptions};
use scenechat::config::{ConfigError, Features, PipelineConfig};
use scenechat::corpus::write_corpus;
use scenechat::layout::Layout;
use scenechat::pipeline::{Engine, RunError};
use scenechat::run::{run_worker, RunOptions};
use scenechat::shard::{ingest, plan_shards};
use scenechat::writer::validate_record;
use scenechat_core::ingestion::{lint_manifest, load_manifest};
use scenechat_core::scene::{scene_from_boxes, serialize_tree};
use scenechat_core::ReductionMode;
use scenechat_gateway::Mode;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "scenechat",
    version,
    about = "Turn image metadata into multi-turn instruction conversations"
)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    worker_id: Option<String>,
    /// Shard count for `plan`.
    #[arg(long, global = true)]
    shards: Option<u32>,
    /// Comma-separated subset of filtering,bbox,reduction, or all/none.
    #[arg(long, global = true)]
    features: Option<Features>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Answer LLM calls from recorded fixtures instead of a live endpoint.
    #[arg(long, global = true)]
    scripted_fixtures: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Group registered datasets by image into the unified manifest.
    Ingest {
        /// Write a synthetic corpus of this many images and ingest it instead
        /// of the configured registry.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Partition the grouped manifest into shard index files.
    Plan,
    /// Claim shards and generate conversations until none are left.
    Run {
        #[arg(long)]
        max_shards: Option<usize>,
    },
    /// Print scene trees for manifest records.
    Tree {
        /// Manifest to read; defaults to the grouped manifest of the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Only images whose id or uri contains this string.
        #[arg(long)]
        image: Option<String>,
        #[arg(long, default_value_t = 5)]
        limit: usize,
    },
    /// Efficiency table over a synthetic corpus with a scripted LLM.
    Bench {
        #[arg(long, default_value_t = 500)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        latency_ms: u64,
        #[arg(long, default_value_t = 8)]
        parallelism: usize,
        #[arg(long)]
        sidecar_ms: Option<u64>,
        /// Reduction mode for variants with reduction on.
        #[arg(long, default_value = "lexical")]
        reduction: String,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Lint a manifest, or with --records check conversation output files.
    Validate {
        paths: Vec<PathBuf>,
        #[arg(long)]
        records: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Unreachable(String),
    Lint(usize),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Unreachable(_) => 3,
            Failure::Lint(_) | Failure::Other(_) => 1,
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Config(c.0),
            RunError::Unreachable(m) => Failure::Unreachable(m),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(f) = cli.features {
        cfg.features = f;
    }
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    if let Some(n) = cli.shards {
        cfg.shard_count = n;
    }
    if let Some(p) = &cli.scripted_fixtures {
        cfg.gateway.mode = Mode::Scripted;
        cfg.scripted.fixtures = Some(p.clone());
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Ingest { synthetic } => {
            let mut cfg = load_config(&cli)?;
            if let Some(n) = synthetic {
                let dir = cfg.output_dir.join("synthetic");
                cfg.registry_path = write_corpus(&dir, *n, cfg.rng_seed).context("writing synthetic corpus")?;
            }
            cfg.validate(true)?;
            let layout = Layout::new(&cfg.output_dir);
            let report = ingest(&cfg.registry_path, &layout).context("ingest")?;
            for w in report.warnings.iter().take(20) {
                eprintln!("warning: {}/{}: {}", w.dataset, w.image_id, w.message);
            }
            println!(
                "{} datasets, {} records -> {} images in {} ({} warnings)",
                report.datasets,
                report.records_in,
                report.images_out,
                layout.manifest().display(),
                report.warnings.len()
            );
        }
        Command::Plan => {
            let cfg = load_config(&cli)?;
            cfg.validate(false)?;
            let plan = plan_shards(&Layout::new(&cfg.output_dir), cfg.shard_count).context("plan")?;
            println!("{}", serde_json::to_string(&plan).context("plan")?);
        }
        Command::Run { max_shards } => {
            let cfg = load_config(&cli)?;
            cfg.validate(false)?;
            let layout = Layout::new(&cfg.output_dir);
            let worker = cli
                .worker_id
                .clone()
                .unwrap_or_else(|| format!("worker-{}", std::process::id()));
            let engine = Engine::new(cfg)?;
            let summary = run_worker(
                &engine,
                &layout,
                &worker,
                &RunOptions {
                    max_shards: *max_shards,
                    crash_after: None,
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&summary).context("summary")?);
        }
        Command::Tree { manifest, image, limit } => {
            let (path, scene) = match manifest {
                Some(p) => (
                    p.clone(),
                    cli.config
                        .as_ref()
                        .map(|_| load_config(&cli))
                        .transpose()?
                        .map(|c| c.scene),
                ),
                None => {
                    let cfg = load_config(&cli)?;
                    (Layout::new(&cfg.output_dir).manifest(), Some(cfg.scene))
                }
            };
            let scene = scene.unwrap_or_default();
            let loaded = load_manifest(&path).with_context(|| path.display().to_string())?;
            let matching = loaded.bundles.iter().filter(|b| {
                image
                    .as_deref()
                    .is_none_or(|s| b.image.image_id.contains(s) || b.image.uri.contains(s))
            });
            for b in matching.take(*limit) {
                println!("# {}/{} ({})", b.image.dataset_id, b.image.image_id, b.image.uri);
                print!("{}", serialize_tree(&scene_from_boxes(&b.boxes, &scene), &b.image));
                println!();
            }
        }
        Command::Bench {
            images,
            latency_ms,
            parallelism,
            sidecar_ms,
            reduction,
            json,
        } => {
            let reduction = match reduction.as_str() {
                "lexical" => ReductionMode::Lexical,
                "llm" => ReductionMode::Llm,
                other => return Err(Failure::Config(format!("unknown reduction mode `{other}`"))),
            };
            let report = run_bench(&BenchOptions {
                images: *images,
                latency_ms: *latency_ms,
                parallelism: *parallelism,
                max_in_flight: *parallelism,
                sidecar_ms: *sidecar_ms,
                reduction,
                seed: cli.seed.unwrap_or(7),
                ..Default::default()
            })?;
            print!("{}", report.to_markdown());
            if let Some(p) = json {
                std::fs::write(p, serde_json::to_string_pretty(&report).context("report")?)
                    .with_context(|| p.display().to_string())?;
            }
        }
        Command::Validate { paths, records } => {
            if paths.is_empty() {
                return Err(Failure::Config("no files to validate".into()));
            }
            let mut problems = 0;
            for path in paths {
                if *records {
                    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
                    for (i, line) in text.lines().enumerate() {
                        let errs = match serde_json::from_str(line) {
                            Ok(v) => validate_record(&v),
                            Err(e) => vec![e.to_string()],
                        };
                        for e in &errs {
                            println!("{}:{}: {e}", path.display(), i + 1);
                        }
                        problems += errs.len();
                    }
                } else {
                    for issue in lint_manifest(path).with_context(|| path.display().to_string())? {
                        println!(
                            "{}:{}: {}: {}",
                            path.display(),
                            issue.line,
                            issue.severity,
                            issue.message
                        );
                        if issue.severity == "error" {
                            problems += 1;
                        }
                    }
                }
            }
            if problems > 0 {
                return Err(Failure::Lint(problems));
            }
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Unreachable(m) => eprintln!("endpoint unreachable: {m}"),
                Failure::Lint(n) => eprintln!("{n} problems found"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
