//! Grouped manifest writing and deterministic shard planning.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use scenechat_core::ingestion::{load_registry_manifests, ExternalGrouper, IngestError, Linker, Registry};
use scenechat_core::metadata::{ManifestRecord, MetadataBundle, Warning};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layout::Layout;

/// One line of the grouped manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedRecord {
    pub link_key: String,
    #[serde(flatten)]
    pub record: ManifestRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub offset: u64,
    pub link_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub shard_count: u32,
    pub records: u64,
    pub sizes: Vec<u64>,
}

#[derive(Debug, Default)]
pub struct IngestReport {
    pub datasets: usize,
    pub records_in: u64,
    pub images_out: u64,
    pub warnings: Vec<Warning>,
}

/// Shard of a link key: the first eight bytes of its SHA-256, big endian,
/// modulo `n`.
pub fn shard_of(link_key: &str, n: u32) -> u32 {
    let d = Sha256::digest(link_key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_be_bytes(b) % u64::from(n.max(1))) as u32
}

fn io_err(path: &Path, e: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Writes `path` through a sibling temp file so readers never see a
/// half-written file.
pub(crate) fn write_atomic(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut w = BufWriter::new(tmp.reopen()?);
    f(&mut w)?;
    w.flush()?;
    w.get_ref().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Loads every registered dataset, groups records by link key and writes
/// the grouped manifest.
pub fn ingest(registry_path: &Path, layout: &Layout) -> Result<IngestReport, IngestError> {
    let reg = Registry::load(registry_path)?;
    let linker = Linker::from_registry(&reg)?;
    let loaded = load_registry_manifests(&reg)?;
    std::fs::create_dir_all(layout.root()).map_err(|e| io_err(layout.root(), e))?;
    let mut grouper = ExternalGrouper::new(&linker, 100_000).spill_to(layout.root());
    for b in loaded.bundles {
        grouper.push(b)?;
    }
    let out = layout.manifest();
    let mut groups: Vec<(String, MetadataBundle)> = Vec::new();
    let stats = grouper.finish(|k, b| {
        groups.push((k.to_string(), b));
        Ok(())
    })?;
    write_atomic(&out, |w| {
        for (key, bundle) in &groups {
            let line = GroupedRecord {
                link_key: key.clone(),
                record: bundle.to_record(),
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
    .map_err(|e| io_err(&out, e))?;
    Ok(IngestReport {
        datasets: reg.len(),
        records_in: stats.records_in,
        images_out: stats.groups_out,
        warnings: loaded.warnings,
    })
}

#[derive(Deserialize)]
struct KeyOnly {
    link_key: String,
}

/// Partitions the grouped manifest into `n` index files of byte offsets.
pub fn plan_shards(layout: &Layout, n: u32) -> Result<ShardPlan, IngestError> {
    let manifest = layout.manifest();
    let f = File::open(&manifest).map_err(|e| io_err(&manifest, e))?;
    let mut reader = BufReader::new(f);
    let mut shards: Vec<Vec<ShardEntry>> = vec![Vec::new(); n.max(1) as usize];
    let mut offset = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(|e| io_err(&manifest, e))?;
        if read == 0 {
            break;
        }
        lineno += 1;
        if !line.trim().is_empty() {
            let k: KeyOnly = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                path: manifest.clone(),
                line: lineno,
                message: e.to_string(),
            })?;
            let s = shard_of(&k.link_key, n);
            shards[s as usize].push(ShardEntry {
                offset,
                link_key: k.link_key,
            });
        }
        offset += read as u64;
    }

    let dir = layout.shards_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?.flatten() {
        if entry.path().extension().is_some_and(|x| x == "idx") {
            std::fs::remove_file(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
        }
    }
    for (i, entries) in shards.iter().enumerate() {
        let path = layout.shard_index(i as u32);
        write_atomic(&path, |w| {
            for e in entries {
                serde_json::to_writer(&mut *w, e)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
        .map_err(|e| io_err(&path, e))?;
    }
    let plan = ShardPlan {
        shard_count: n,
        records: shards.iter().map(|s| s.len() as u64).sum(),
        sizes: shards.iter().map(|s| s.len() as u64).collect(),
    };
    let path = layout.plan();
    write_atomic(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &plan)?;
        w.write_all(b"\n")
    })
    .map_err(|e| io_err(&path, e))?;
    Ok(plan)
}

pub fn read_plan(layout: &Layout) -> Result<ShardPlan, IngestError> {
    let path = layout.plan();
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| IngestError::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_shard(layout: &Layout, shard: u32) -> Result<Vec<ShardEntry>, IngestError> {
    let path = layout.shard_index(shard);
    let f = File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            path: path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Random access into the grouped manifest.
pub struct ManifestReader {
    reader: BufReader<File>,
    path: std::path::PathBuf,
}

impl ManifestReader {
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            reader: BufReader::new(f),
            path: path.to_path_buf(),
        })
    }

    pub fn read_at(&mut self, offset: u64) -> Result<GroupedRecord, IngestError> {
        self.reader
            .seek(SeekFrom::Start(offset))
            .map_err(|e| io_err(&self.path, e))?;
        let mut line = String::new();
        self.reader.read_line(&mut line).map_err(|e| io_err(&self.path, e))?;
        serde_json::from_str(&line).map_err(|e| IngestError::Parse {
            path: self.path.clone(),
            line: 0,
            message: format!("record at offset {offset}: {e}"),
        })
    }

    /// Every record in file order.
    pub fn read_all(path: &Path) -> Result<Vec<GroupedRecord>, IngestError> {
        let f = File::open(path).map_err(|e| io_err(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(layout: &Layout, keys: &[String]) {
        std::fs::create_dir_all(layout.root()).unwrap();
        let mut text = String::new();
        for (i, k) in keys.iter().enumerate() {
            let rec = GroupedRecord {
                link_key: k.clone(),
                record: ManifestRecord {
                    dataset: "d".into(),
                    image_id: i.to_string(),
                    uri: format!("{i}.jpg"),
                    width: 10,
                    height: 10,
                    captions: vec![],
                    boxes: vec![],
                    qas: vec![],
                },
            };
            text.push_str(&serde_json::to_string(&rec).unwrap());
            text.push('\n');
        }
        std::fs::write(layout.manifest(), text).unwrap();
    }

    #[test]
    fn ten_images_two_shards() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let keys: Vec<String> = (0..10).map(|i| format!("file-stem:img{i}")).collect();
        write_manifest(&layout, &keys);
        let plan = plan_shards(&layout, 2).unwrap();
        assert_eq!(plan.sizes.len(), 2);
        assert_eq!(plan.sizes.iter().sum::<u64>(), 10);

        let one = plan_shards(&layout, 1).unwrap();
        assert_eq!(one.sizes, vec![10]);
        assert!(!layout.shard_index(1).exists());
        let entries = read_shard(&layout, 0).unwrap();
        let mut reader = ManifestReader::open(&layout.manifest()).unwrap();
        for (e, k) in entries.iter().zip(&keys) {
            assert_eq!(&reader.read_at(e.offset).unwrap().link_key, k);
        }
    }

    #[test]
    fn grouped_record_is_flat() {
        let rec = GroupedRecord {
            link_key: "ns:1".into(),
            record: ManifestRecord {
                dataset: "d".into(),
                image_id: "1".into(),
                uri: "1.jpg".into(),
                width: 4,
                height: 4,
                captions: vec![],
                boxes: vec![],
                qas: vec![],
            },
        };
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        assert_eq!(v["link_key"], "ns:1");
        assert_eq!(v["dataset"], "d");
        let back: GroupedRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, rec);
    }
}
