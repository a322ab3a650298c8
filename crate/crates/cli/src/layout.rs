//! File layout of a pipeline output directory.
//!
//! ```text
//! <out>/manifest.jsonl            grouped manifest, one image per line
//! <out>/shards/plan.json          shard count and sizes
//! <out>/shards/shard-0000.idx     byte offsets into the manifest
//! <out>/claims/shard-0000.claim.N claim generations
//! <out>/conversations/shard-0000.jsonl
//! <out>/conversations/shard-0000.done
//! <out>/errors.jsonl
//! <out>/summary-<worker>.json
//! ```

use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn shards_dir(&self) -> PathBuf {
        self.root.join("shards")
    }

    pub fn plan(&self) -> PathBuf {
        self.shards_dir().join("plan.json")
    }

    pub fn shard_index(&self, shard: u32) -> PathBuf {
        self.shards_dir().join(format!("shard-{shard:04}.idx"))
    }

    pub fn claims_dir(&self) -> PathBuf {
        self.root.join("claims")
    }

    pub fn conversations_dir(&self) -> PathBuf {
        self.root.join("conversations")
    }

    pub fn output(&self, shard: u32) -> PathBuf {
        self.conversations_dir().join(format!("shard-{shard:04}.jsonl"))
    }

    pub fn done_marker(&self, shard: u32) -> PathBuf {
        self.conversations_dir().join(format!("shard-{shard:04}.done"))
    }

    pub fn errors(&self) -> PathBuf {
        self.root.join("errors.jsonl")
    }

    pub fn summary(&self, worker: &str) -> PathBuf {
        self.root.join(format!("summary-{worker}.json"))
    }

    /// All conversation files that exist, in shard order.
    pub fn output_files(&self) -> std::io::Result<Vec<PathBuf>> {
        let dir = self.conversations_dir();
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        Ok(files)
    }
}
