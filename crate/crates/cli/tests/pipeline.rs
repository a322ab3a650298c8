use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use scenechat::config::{Features, PipelineConfig};
use scenechat::corpus::write_corpus;
use scenechat::layout::Layout;
use scenechat::pipeline::Engine;
use scenechat::run::{output_ids, run_worker, RunOptions};
use scenechat::shard::{ingest, plan_shards, read_shard, GroupedRecord};
use scenechat::writer::validate_record;
use scenechat_core::metadata::ManifestRecord;
use scenechat_gateway::Mode;
use sha2::{Digest, Sha256};

fn scripted(dir: &Path, features: Features) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        output_dir: dir.to_path_buf(),
        features,
        rng_seed: 11,
        ..Default::default()
    };
    cfg.gateway.mode = Mode::Scripted;
    cfg
}

fn prepare(dir: &Path, images: usize, shards: u32) -> Layout {
    let reg = write_corpus(&dir.join("corpus"), images, 5).unwrap();
    let layout = Layout::new(dir);
    ingest(&reg, &layout).unwrap();
    plan_shards(&layout, shards).unwrap();
    layout
}

fn line_count(layout: &Layout) -> usize {
    layout
        .output_files()
        .unwrap()
        .iter()
        .map(|p| std::fs::read_to_string(p).unwrap().lines().count())
        .sum()
}

#[test]
fn ten_images_give_ten_records_and_matching_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = prepare(tmp.path(), 10, 2);
    let engine = Engine::new(scripted(tmp.path(), Features::ALL)).unwrap();
    let s = run_worker(&engine, &layout, "w0", &RunOptions::default()).unwrap();
    assert_eq!(s.images, 10);
    assert_eq!(s.conversations, 10);
    assert_eq!(s.failures, 0);
    assert_eq!(line_count(&layout), 10);
    assert_eq!(s.shards.len(), 2);
    for shard in 0..2 {
        assert!(layout.done_marker(shard).exists());
    }
    let saved: scenechat::Summary =
        serde_json::from_str(&std::fs::read_to_string(layout.summary("w0")).unwrap()).unwrap();
    assert_eq!(saved.conversations, 10);
    assert!(saved.stage_secs.contains_key("scene_tree"));
}

#[test]
fn direct_generation_skips_tree_verification_and_reduction() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = prepare(tmp.path(), 6, 1);
    let engine = Engine::new(scripted(tmp.path(), Features::NONE)).unwrap();
    let s = run_worker(&engine, &layout, "w0", &RunOptions::default()).unwrap();
    assert_eq!(s.conversations + s.failures, 6);
    assert!(s.conversations > 0);
    for stage in ["verification", "quality", "reduction"] {
        assert!(
            s.llm.get(stage).is_none_or(|m| m.calls == 0),
            "{stage} called in direct mode: {:?}",
            s.llm
        );
    }
    for path in layout.output_files().unwrap() {
        for line in std::fs::read_to_string(path).unwrap().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(validate_record(&v).is_empty());
            let p = &v["provenance"];
            assert!(p.get("tree").is_none());
            assert_eq!(p["context_chars_final"], p["context_chars_initial"]);
            assert!(p["turns"].as_array().unwrap().iter().all(|t| t["verified"].is_null()));
        }
    }
}

#[test]
fn second_run_resumes_without_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = prepare(tmp.path(), 12, 1);
    let engine = Engine::new(scripted(tmp.path(), Features::ALL)).unwrap();
    let err = run_worker(
        &engine,
        &layout,
        "a",
        &RunOptions {
            crash_after: Some(5),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(err.to_string().contains('5'), "{err}");
    assert_eq!(line_count(&layout), 5);

    // The abandoned claim is fresh, so another worker must wait it out.
    let mut cfg = scripted(tmp.path(), Features::ALL);
    cfg.staleness_secs = 2;
    cfg.heartbeat_secs = 1;
    let engine = Engine::new(cfg).unwrap();
    let s = run_worker(&engine, &layout, "b", &RunOptions::default()).unwrap();
    assert!(s.shards.is_empty());
    std::thread::sleep(std::time::Duration::from_millis(2200));
    let s = run_worker(&engine, &layout, "b", &RunOptions::default()).unwrap();
    assert_eq!(s.resumed, 5);
    assert_eq!(s.conversations, 7);
    let ids = output_ids(&layout).unwrap();
    assert_eq!(ids.len(), 12);
    assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 12);
}

fn oracle_shard(key: &str, n: u32) -> u32 {
    let hex: String = Sha256::digest(key.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    (u64::from_str_radix(&hex[..16], 16).unwrap() % n as u64) as u32
}

#[test]
fn plan_matches_independent_hash_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let layout = Layout::new(tmp.path());
    let mut f = std::fs::File::create(layout.manifest()).unwrap();
    let keys: Vec<String> = (0..1000).map(|i| format!("file-stem:photo_{i:04}")).collect();
    for (i, k) in keys.iter().enumerate() {
        let rec = GroupedRecord {
            link_key: k.clone(),
            record: ManifestRecord {
                dataset: "d".into(),
                image_id: i.to_string(),
                uri: format!("photo_{i:04}.jpg"),
                width: 10,
                height: 10,
                captions: vec![],
                boxes: vec![],
                qas: vec![],
            },
        };
        writeln!(f, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
    }
    drop(f);
    let n = 8;
    let plan = plan_shards(&layout, n).unwrap();
    assert_eq!(plan.records, 1000);
    let mut seen = 0;
    for shard in 0..n {
        let entries = read_shard(&layout, shard).unwrap();
        let expected: BTreeSet<&str> = keys
            .iter()
            .filter(|k| oracle_shard(k, n) == shard)
            .map(String::as_str)
            .collect();
        let got: BTreeSet<&str> = entries.iter().map(|e| e.link_key.as_str()).collect();
        assert_eq!(got, expected, "shard {shard}");
        seen += entries.len();
    }
    assert_eq!(seen, 1000);
    let max = *plan.sizes.iter().max().unwrap() as f64;
    let min = *plan.sizes.iter().min().unwrap() as f64;
    assert!(max / min < 1.5, "{:?}", plan.sizes);

    let one = plan_shards(&layout, 1).unwrap();
    assert_eq!(one.sizes, vec![1000]);
    assert!(!layout.shard_index(1).exists());
}
