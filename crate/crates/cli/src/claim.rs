//! File-based shard claims.
//!
//! A claim is a file `shard-NNNN.claim.G` created with `O_CREAT | O_EXCL`.
//! `G` is a generation number: the highest generation present is the
//! current claim. A worker takes over a stale or released claim by creating
//! generation `G + 1`, so two workers reclaiming the same stale shard race on
//! one exclusive create and exactly one wins. Claim files are never deleted,
//! which keeps an old holder from mistaking a later release for its own
//! claim becoming current again.

use std::fs::OpenOptions;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::shard::write_atomic;

#[derive(Debug, Error)]
pub enum ClaimError {
    #[error("shard {shard} is claimed by {holder}")]
    AlreadyClaimed { shard: u32, holder: String },
    #[error("claim i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardClaim {
    pub shard_id: u32,
    pub worker_id: String,
    pub generation: u64,
    /// Unix milliseconds of the last refresh.
    pub heartbeat: u64,
    #[serde(default)]
    pub released: bool,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct ClaimStore {
    dir: PathBuf,
    staleness: Duration,
}

impl ClaimStore {
    pub fn new(dir: impl Into<PathBuf>, staleness: Duration) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, staleness })
    }

    fn prefix(shard: u32) -> String {
        format!("shard-{shard:04}.claim.")
    }

    pub fn path(&self, shard: u32, generation: u64) -> PathBuf {
        self.dir.join(format!("{}{generation}", Self::prefix(shard)))
    }

    /// Generations present for `shard`, ascending.
    pub fn generations(&self, shard: u32) -> std::io::Result<Vec<u64>> {
        let prefix = Self::prefix(shard);
        let mut gens: Vec<u64> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name();
                name.to_str()?.strip_prefix(&prefix)?.parse().ok()
            })
            .collect();
        gens.sort_unstable();
        Ok(gens)
    }

    /// Reads one claim generation. A file that exists but cannot be parsed
    /// yet (its creator is still writing it) is reported with the file's
    /// modification time as heartbeat.
    pub fn read(&self, shard: u32, generation: u64) -> std::io::Result<ShardClaim> {
        let path = self.path(shard, generation);
        let text = std::fs::read_to_string(&path)?;
        match serde_json::from_str(&text) {
            Ok(c) => Ok(c),
            Err(_) => {
                let mtime = std::fs::metadata(&path)?
                    .modified()?
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_millis() as u64)
                    .unwrap_or(0);
                Ok(ShardClaim {
                    shard_id: shard,
                    worker_id: "<unknown>".into(),
                    generation,
                    heartbeat: mtime,
                    released: false,
                })
            }
        }
    }

    pub fn current(&self, shard: u32) -> std::io::Result<Option<ShardClaim>> {
        match self.generations(shard)?.last() {
            Some(&g) => self.read(shard, g).map(Some),
            None => Ok(None),
        }
    }

    pub fn is_live(&self, c: &ShardClaim) -> bool {
        !c.released && now_ms().saturating_sub(c.heartbeat) <= self.staleness.as_millis() as u64
    }

    /// Claims `shard` for `worker`, taking over stale or released claims.
    pub fn claim(&self, shard: u32, worker: &str) -> Result<ClaimHandle, ClaimError> {
        let next = match self.generations(shard)?.last() {
            None => 1,
            Some(&g) => {
                let current = match self.read(shard, g) {
                    Ok(c) => c,
                    // Vanished between listing and reading: treat as held.
                    Err(e) if e.kind() == ErrorKind::NotFound => {
                        return Err(ClaimError::AlreadyClaimed {
                            shard,
                            holder: "<unknown>".into(),
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
                if self.is_live(&current) {
                    return Err(ClaimError::AlreadyClaimed {
                        shard,
                        holder: current.worker_id,
                    });
                }
                debug!(shard, previous = %current.worker_id, "taking over stale claim");
                g + 1
            }
        };
        let path = self.path(shard, next);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(ClaimError::AlreadyClaimed {
                    shard,
                    holder: "<racing worker>".into(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let claim = ShardClaim {
            shard_id: shard,
            worker_id: worker.to_string(),
            generation: next,
            heartbeat: now_ms(),
            released: false,
        };
        f.write_all(serde_json::to_string(&claim).expect("claim serializes").as_bytes())?;
        f.sync_all()?;
        Ok(ClaimHandle {
            store: self.clone(),
            claim,
            heartbeat: None,
        })
    }

    fn write_claim(&self, c: &ShardClaim) -> std::io::Result<()> {
        let path = self.path(c.shard_id, c.generation);
        write_atomic(&path, |w| {
            serde_json::to_writer(&mut *w, c)?;
            Ok(())
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Ownership of one shard. Dropping the handle stops the heartbeat and
/// marks the claim released.
pub struct ClaimHandle {
    store: ClaimStore,
    claim: ShardClaim,
    heartbeat: Option<(mpsc::Sender<()>, JoinHandle<()>)>,
}

impl ClaimHandle {
    pub fn claim(&self) -> &ShardClaim {
        &self.claim
    }

    /// False once another worker has taken over this shard.
    pub fn still_held(&self) -> bool {
        !self.store.path(self.claim.shard_id, self.claim.generation + 1).exists()
    }

    pub fn refresh(&self) -> std::io::Result<()> {
        let mut c = self.claim.clone();
        c.heartbeat = now_ms();
        self.store.write_claim(&c)
    }

    /// Refreshes the heartbeat every `every` on a background thread.
    pub fn start_heartbeat(&mut self, every: Duration) {
        if self.heartbeat.is_some() {
            return;
        }
        let (tx, rx) = mpsc::channel::<()>();
        let store = self.store.clone();
        let claim = self.claim.clone();
        // Dropping the sender wakes the thread with Disconnected.
        let t = std::thread::spawn(move || {
            while let Err(RecvTimeoutError::Timeout) = rx.recv_timeout(every) {
                let mut c = claim.clone();
                c.heartbeat = now_ms();
                if let Err(e) = store.write_claim(&c) {
                    warn!(shard = c.shard_id, error = %e, "heartbeat failed");
                }
            }
        });
        self.heartbeat = Some((tx, t));
    }

    fn stop_heartbeat(&mut self) {
        if let Some((tx, t)) = self.heartbeat.take() {
            drop(tx);
            let _ = t.join();
        }
    }

    pub fn release(mut self) -> std::io::Result<()> {
        self.release_inner()
    }

    fn release_inner(&mut self) -> std::io::Result<()> {
        self.stop_heartbeat();
        if self.claim.released {
            return Ok(());
        }
        self.claim.released = true;
        if self.still_held() {
            self.claim.heartbeat = now_ms();
            self.store.write_claim(&self.claim)?;
        }
        Ok(())
    }

    /// Drops the handle without releasing, as a crashed worker would.
    #[doc(hidden)]
    pub fn abandon(mut self) {
        self.stop_heartbeat();
        self.claim.released = true;
    }
}

impl Drop for ClaimHandle {
    fn drop(&mut self) {
        if let Err(e) = self.release_inner() {
            warn!(shard = self.claim.shard_id, error = %e, "claim release failed");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Barrier};

    fn store(secs: u64) -> (tempfile::TempDir, ClaimStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = ClaimStore::new(dir.path().join("claims"), Duration::from_secs(secs)).unwrap();
        (dir, s)
    }

    #[test]
    fn second_worker_is_refused() {
        let (_d, s) = store(300);
        let h = s.claim(0, "a").unwrap();
        assert_eq!(h.claim().generation, 1);
        match s.claim(0, "b") {
            Err(ClaimError::AlreadyClaimed { holder, .. }) => assert_eq!(holder, "a"),
            other => panic!("unexpected {:?}", other.map(|h| h.claim().clone())),
        }
        assert!(s.claim(1, "b").is_ok());
    }

    #[test]
    fn released_claim_is_reclaimable() {
        let (_d, s) = store(300);
        s.claim(3, "a").unwrap().release().unwrap();
        let h = s.claim(3, "b").unwrap();
        assert_eq!(h.claim().generation, 2);
        assert_eq!(s.generations(3).unwrap(), vec![1, 2]);
    }

    #[test]
    fn stale_claim_is_taken_over_once() {
        let (_d, s) = store(300);
        let stale = ShardClaim {
            shard_id: 5,
            worker_id: "dead".into(),
            generation: 1,
            heartbeat: now_ms() - 301_000,
            released: false,
        };
        s.write_claim(&stale).unwrap();
        let winner = s.claim(5, "b").unwrap();
        assert!(s.claim(5, "c").is_err());
        assert!(winner.still_held());
    }

    #[test]
    fn heartbeat_keeps_claim_fresh() {
        let (_d, s) = store(300);
        let mut h = s.claim(0, "a").unwrap();
        let before = s.read(0, 1).unwrap().heartbeat;
        h.start_heartbeat(Duration::from_millis(5));
        std::thread::sleep(Duration::from_millis(40));
        assert!(s.read(0, 1).unwrap().heartbeat > before);
        drop(h);
        assert!(s.read(0, 1).unwrap().released);
    }

    #[test]
    fn racing_workers_have_one_winner() {
        let (_d, s) = store(300);
        for shard in 0..20 {
            let barrier = Arc::new(Barrier::new(8));
            let winners: Vec<bool> = std::thread::scope(|scope| {
                let hs: Vec<_> = (0..8)
                    .map(|w| {
                        let b = barrier.clone();
                        let s = &s;
                        scope.spawn(move || {
                            b.wait();
                            s.claim(shard, &format!("w{w}")).map(ClaimHandle::abandon).is_ok()
                        })
                    })
                    .collect();
                hs.into_iter().map(|h| h.join().unwrap()).collect()
            });
            assert_eq!(winners.iter().filter(|w| **w).count(), 1);
        }
    }
}
