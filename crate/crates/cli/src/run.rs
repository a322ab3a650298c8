//! Worker loop: claim shards, process images concurrently, write in order.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use scenechat_gateway::StageMetrics;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::claim::{ClaimError, ClaimHandle, ClaimStore};
use crate::layout::Layout;
use crate::pipeline::{Engine, ImageFailure, RunError, StageTimes};
use crate::shard::{read_plan, read_shard, shard_of, write_atomic, ManifestReader, ShardEntry};
use crate::writer::{conversation_id, ConversationRecord, ShardWriter};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many shards.
    pub max_shards: Option<usize>,
    /// Simulates a worker dying after writing this many records: the claim
    /// is left behind unreleased and the run returns [`RunError::Crashed`].
    pub crash_after: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub worker_id: String,
    pub features: String,
    pub shards: Vec<u32>,
    pub images: u64,
    pub conversations: u64,
    pub turns: u64,
    /// Records already present from an earlier run.
    pub resumed: u64,
    pub failures: u64,
    pub failures_by_stage: BTreeMap<String, u64>,
    pub wall_secs: f64,
    pub conversations_per_hour: f64,
    /// Time per stage summed over worker threads.
    pub stage_secs: BTreeMap<String, f64>,
    pub llm: BTreeMap<String, StageMetrics>,
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    worker: &'a str,
    shard: u32,
    link_key: &'a str,
    stage: &'a str,
    reason: &'a str,
}

enum Outcome {
    Ok(Box<ConversationRecord>),
    Failed(ImageFailure),
}

/// Shard visiting order for a worker: all shards, starting at a point
/// derived from the worker id so workers spread out.
pub fn shard_order(worker_id: &str, n: u32) -> Vec<u32> {
    let start = shard_of(worker_id, n);
    (0..n).map(|i| (start + i) % n).collect()
}

pub fn run_worker(engine: &Engine, layout: &Layout, worker_id: &str, opts: &RunOptions) -> Result<Summary, RunError> {
    let plan = read_plan(layout)?;
    let claims = ClaimStore::new(layout.claims_dir(), Duration::from_secs(engine.cfg.staleness_secs))?;
    let heartbeat = Duration::from_secs(engine.cfg.heartbeat_secs);
    let started = Instant::now();
    let times = StageTimes::default();
    let mut summary = Summary {
        worker_id: worker_id.to_string(),
        features: engine.cfg.features.to_string(),
        ..Default::default()
    };

    for shard in shard_order(worker_id, plan.shard_count) {
        if opts.max_shards.is_some_and(|m| summary.shards.len() >= m) {
            break;
        }
        if layout.done_marker(shard).exists() {
            continue;
        }
        let mut handle = match claims.claim(shard, worker_id) {
            Ok(h) => h,
            Err(ClaimError::AlreadyClaimed { holder, .. }) => {
                info!(shard, %holder, "shard busy");
                continue;
            }
            Err(ClaimError::Io(e)) => return Err(e.into()),
        };
        if layout.done_marker(shard).exists() {
            continue;
        }
        handle.start_heartbeat(heartbeat);
        summary.shards.push(shard);
        let complete = match process_shard(engine, layout, shard, &handle, &times, &mut summary, opts) {
            Ok(c) => c,
            Err(e @ RunError::Crashed(_)) => {
                handle.abandon();
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if complete && handle.still_held() {
            write_atomic(&layout.done_marker(shard), |w| writeln!(w, "{worker_id}"))?;
        }
        handle.release()?;
    }

    summary.wall_secs = started.elapsed().as_secs_f64();
    summary.conversations_per_hour = if summary.wall_secs > 0.0 {
        summary.conversations as f64 * 3600.0 / summary.wall_secs
    } else {
        0.0
    };
    summary.stage_secs = times.seconds();
    summary.llm = engine
        .gateway
        .metrics()
        .snapshot()
        .into_iter()
        .map(|(s, m)| (s.as_str().to_string(), m))
        .collect();
    let path = layout.summary(worker_id);
    write_atomic(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")
    })?;
    Ok(summary)
}

/// Returns whether every entry of the shard was handled.
fn process_shard(
    engine: &Engine,
    layout: &Layout,
    shard: u32,
    handle: &ClaimHandle,
    times: &StageTimes,
    summary: &mut Summary,
    opts: &RunOptions,
) -> Result<bool, RunError> {
    let entries = read_shard(layout, shard)?;
    let mut writer = ShardWriter::open(&layout.output(shard))?;
    let todo: Vec<ShardEntry> = entries
        .into_iter()
        .filter(|e| !writer.contains(&conversation_id(&e.link_key, engine.image_seed(&e.link_key))))
        .collect();
    summary.resumed += writer.completed() as u64;
    let mut errors = OpenOptions::new().create(true).append(true).open(layout.errors())?;
    let manifest = layout.manifest();

    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
    let threads = engine.cfg.parallelism.min(todo.len()).max(1);
    let readers = (0..threads)
        .map(|_| ManifestReader::open(&manifest))
        .collect::<Result<Vec<_>, _>>()?;

    std::thread::scope(|scope| {
        for mut reader in readers {
            let tx = tx.clone();
            let (todo, next, stop) = (&todo, &next, &stop);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(entry) = todo.get(i) else { break };
                    let outcome = match reader.read_at(entry.offset) {
                        Ok(rec) => match engine.process(rec, times) {
                            Ok(r) => Outcome::Ok(Box::new(r)),
                            Err(f) => Outcome::Failed(f),
                        },
                        Err(e) => Outcome::Failed(ImageFailure {
                            stage: "ingest",
                            reason: e.to_string(),
                        }),
                    };
                    if tx.send((i, outcome)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);

        let mut pending: HashMap<usize, Outcome> = HashMap::new();
        let mut expect = 0usize;
        let mut consume = || -> Result<bool, RunError> {
            for (i, outcome) in rx.iter() {
                pending.insert(i, outcome);
                while let Some(o) = pending.remove(&expect) {
                    let entry = &todo[expect];
                    expect += 1;
                    summary.images += 1;
                    match o {
                        Outcome::Ok(rec) => {
                            if !handle.still_held() {
                                warn!(shard, "claim lost to another worker; stopping shard");
                                return Ok(false);
                            }
                            let t = Instant::now();
                            if writer.append(&rec)? {
                                summary.conversations += 1;
                                summary.turns += rec.provenance.turns.len() as u64;
                            }
                            times.add(4, t.elapsed());
                            if opts.crash_after.is_some_and(|n| writer.appended() >= n) {
                                return Err(RunError::Crashed(writer.appended()));
                            }
                        }
                        Outcome::Failed(f) => {
                            summary.failures += 1;
                            *summary.failures_by_stage.entry(f.stage.to_string()).or_default() += 1;
                            warn!(shard, key = %entry.link_key, stage = f.stage, reason = %f.reason, "image skipped");
                            let mut line = serde_json::to_vec(&ErrorRecord {
                                worker: &summary.worker_id,
                                shard,
                                link_key: &entry.link_key,
                                stage: f.stage,
                                reason: &f.reason,
                            })
                            .expect("error record serializes");
                            line.push(b'\n');
                            errors.write_all(&line)?;
                        }
                    }
                }
            }
            Ok(expect == todo.len())
        };
        let result = consume();
        stop.store(true, Ordering::SeqCst);
        drop(rx);
        result
    })
}

/// Convenience for tests and the bench: count records and ids in every
/// output file.
pub fn output_ids(layout: &Layout) -> std::io::Result<Vec<String>> {
    let mut ids = Vec::new();
    for path in layout.output_files()? {
        for line in std::fs::read_to_string(&path)?.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(std::io::Error::other)?;
            ids.push(v["id"].as_str().unwrap_or_default().to_string());
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shard_order_covers_all() {
        let mut o = shard_order("worker-3", 7);
        assert_eq!(o.len(), 7);
        o.sort();
        assert_eq!(o, (0..7).collect::<Vec<_>>());
    }
}
