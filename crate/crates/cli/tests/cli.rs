use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::json;

const BIN: &str = env!("CARGO_BIN_EXE_scenechat");

fn scenechat(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SCENECHAT_ENDPOINT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, extra: serde_json::Value) -> String {
    let mut cfg = json!({
        "output_dir": "out",
        "gateway": {"mode": "scripted"},
        "staleness_secs": 2,
        "heartbeat_secs": 1,
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

/// Ids of every output line. With `lenient`, lines that do not parse (a
/// record still being written, or cut short by a kill) are skipped.
fn read_ids(out: &Path, lenient: bool) -> Vec<String> {
    let mut ids = Vec::new();
    let Ok(dir) = std::fs::read_dir(out.join("conversations")) else {
        return ids;
    };
    for entry in dir {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "jsonl") {
            for line in std::fs::read_to_string(&p).unwrap().lines() {
                match serde_json::from_str::<serde_json::Value>(line) {
                    Ok(v) => ids.push(v["id"].as_str().unwrap().to_string()),
                    Err(e) => assert!(lenient, "{}: {e}", p.display()),
                }
            }
        }
    }
    ids
}

fn ids(out: &Path) -> Vec<String> {
    read_ids(out, false)
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(
        scenechat(&["--config", missing.to_str().unwrap(), "plan"])
            .status
            .code(),
        Some(2)
    );

    let bad = write_config(tmp.path(), json!({"shard_count": 0}));
    assert_eq!(scenechat(&["--config", &bad, "plan"]).status.code(), Some(2));

    let no_registry = write_config(tmp.path(), json!({"registry_path": "missing.json"}));
    assert_eq!(scenechat(&["--config", &no_registry, "ingest"]).status.code(), Some(2));

    let cfg = write_config(tmp.path(), json!({}));
    assert_eq!(
        scenechat(&["--config", &cfg, "--features", "bogus", "plan"])
            .status
            .code(),
        Some(2)
    );
    let ok = scenechat(&["--config", &cfg, "ingest", "--synthetic", "4"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert_eq!(scenechat(&["--config", &cfg, "plan"]).status.code(), Some(0));

    let live = write_config(
        tmp.path(),
        json!({"gateway": {"mode": "live", "endpoint_url": "http://127.0.0.1:9", "timeout_ms": 2000}}),
    );
    let out = scenechat(&["--config", &live, "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let broken = tmp.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"dataset\": \"d\"\nnot json\n").unwrap();
    assert_eq!(
        scenechat(&["validate", broken.to_str().unwrap()]).status.code(),
        Some(1)
    );
}

#[test]
fn scripted_run_then_validate_and_tree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    assert!(scenechat(&["--config", &cfg, "ingest", "--synthetic", "8"])
        .status
        .success());
    assert!(scenechat(&["--config", &cfg, "--shards", "3", "plan"]).status.success());
    let run = scenechat(&[
        "--config",
        &cfg,
        "--worker-id",
        "w",
        "--features",
        "bbox,reduction",
        "run",
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["features"], "bbox,reduction");
    let out = tmp.path().join("out");
    assert_eq!(summary["conversations"].as_u64().unwrap() as usize, ids(&out).len());

    let files: Vec<String> = std::fs::read_dir(out.join("conversations"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    let mut args = vec!["validate", "--records"];
    args.extend(files.iter().map(String::as_str));
    let v = scenechat(&args);
    assert!(v.status.success(), "{}", String::from_utf8_lossy(&v.stdout));

    let tree = scenechat(&["--config", &cfg, "tree", "--limit", "2"]);
    let text = String::from_utf8(tree.stdout).unwrap();
    assert_eq!(
        text.matches("\n# ").count() + usize::from(text.starts_with("# ")),
        2,
        "{text}"
    );
    assert!(text.contains("center=("));
}

#[test]
fn killed_worker_is_resumed_without_duplicate_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"parallelism": 2, "scripted": {"latency_ms": 15}}));
    assert!(scenechat(&["--config", &cfg, "ingest", "--synthetic", "30"])
        .status
        .success());
    assert!(scenechat(&["--config", &cfg, "--shards", "2", "plan"]).status.success());
    let out = tmp.path().join("out");

    let mut child = Command::new(BIN)
        .args(["--config", &cfg, "--worker-id", "doomed", "run"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let started = Instant::now();
    loop {
        if read_ids(&out, true).len() >= 4 {
            break;
        }
        assert!(
            child.try_wait().unwrap().is_none(),
            "worker finished before it could be killed"
        );
        assert!(started.elapsed() < Duration::from_secs(60));
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let partial = read_ids(&out, true).len();
    assert!(partial < 30, "{partial}");

    std::thread::sleep(Duration::from_millis(2200));
    let run = scenechat(&["--config", &cfg, "--worker-id", "rescuer", "run"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert!(summary["resumed"].as_u64().unwrap() >= 4);

    let all = ids(&out);
    let unique: BTreeSet<&String> = all.iter().collect();
    assert_eq!(unique.len(), all.len(), "duplicate ids after resume");
    let failures = summary["failures"].as_u64().unwrap() as usize;
    assert_eq!(all.len() + failures, 30);
}
