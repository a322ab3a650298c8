//! Dataset registry, manifest loading and cross-dataset image linking.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::RleMask;
use crate::metadata::{merge_unchecked, ImageRef, ManifestRecord, MetadataBundle, MetadataError, Warning};

pub mod adapters;

/// Namespace used when a dataset does not declare one.
pub const FILE_STEM: &str = "file-stem";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("dataset `{0}` already registered with a different descriptor")]
    DuplicateDataset(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

impl IngestError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Captions,
    Boxes,
    Qa,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub manifest_path: PathBuf,
    pub kind: DatasetKind,
    #[serde(default = "default_namespace")]
    pub link_namespace: String,
    /// Optional JSON Lines sidecar of `{"dataset","image_id","canonical_id"}`.
    #[serde(default)]
    pub id_map_path: Option<PathBuf>,
}

fn default_namespace() -> String {
    FILE_STEM.to_string()
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    datasets: BTreeMap<String, DatasetDescriptor>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Re-registering an identical descriptor is a no-op.
    pub fn register(&mut self, d: DatasetDescriptor) -> Result<(), IngestError> {
        match self.datasets.get(&d.dataset_id) {
            Some(existing) if *existing == d => Ok(()),
            Some(_) => Err(IngestError::DuplicateDataset(d.dataset_id)),
            None => {
                self.datasets.insert(d.dataset_id.clone(), d);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetDescriptor> {
        self.datasets.get(id)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &DatasetDescriptor> {
        self.datasets.values()
    }

    /// Reads a JSON array of descriptors. Relative paths are resolved
    /// against the directory holding the registry file.
    pub fn load(path: &Path) -> Result<Registry, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
        let list: Vec<DatasetDescriptor> = serde_json::from_str(&text).map_err(|e| IngestError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reg = Registry::new();
        for mut d in list {
            d.manifest_path = base.join(&d.manifest_path);
            d.id_map_path = d.id_map_path.map(|p| base.join(p));
            reg.register(d)?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkKey {
    pub namespace: String,
    pub canonical_id: String,
}

impl fmt::Display for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace, self.canonical_id)
    }
}

/// Canonical identity of an image under a naming convention.
///
/// `file-stem` uses the lowercase file name of the uri without extension.
/// Any other namespace uses the trimmed, lowercase image id, with leading
/// zeros stripped from purely numeric ids so `"000123"` and `"123"` agree.
pub fn link_key(image: &ImageRef, namespace: &str) -> LinkKey {
    let canonical = if namespace == FILE_STEM {
        let uri = image.uri.split(['?', '#']).next().unwrap_or("");
        let name = uri.rsplit(['/', '\\']).next().unwrap_or("");
        let stem = match name.rfind('.') {
            Some(0) | None => name,
            Some(i) => &name[..i],
        };
        stem.trim().to_lowercase()
    } else {
        normalize_id(&image.image_id)
    };
    let canonical_id = if canonical.is_empty() {
        format!("{}/{}", image.dataset_id, normalize_id(&image.image_id))
    } else {
        canonical
    };
    LinkKey {
        namespace: namespace.to_string(),
        canonical_id,
    }
}

fn normalize_id(id: &str) -> String {
    let id = id.trim().to_lowercase();
    if !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()) {
        let stripped = id.trim_start_matches('0');
        if stripped.is_empty() {
            "0".into()
        } else {
            stripped.into()
        }
    } else {
        id
    }
}

#[derive(Debug, Deserialize)]
struct IdMapEntry {
    dataset: String,
    image_id: String,
    canonical_id: String,
}

/// Resolves images to link keys using each dataset's namespace and
/// optional explicit id map.
#[derive(Debug, Clone, Default)]
pub struct Linker {
    namespaces: HashMap<String, String>,
    id_map: HashMap<(String, String), String>,
}

impl Linker {
    pub fn from_registry(reg: &Registry) -> Result<Linker, IngestError> {
        let mut linker = Linker::default();
        for d in reg.descriptors() {
            linker.namespaces.insert(d.dataset_id.clone(), d.link_namespace.clone());
            if let Some(p) = &d.id_map_path {
                let f = File::open(p).map_err(|e| IngestError::io(p, e))?;
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| IngestError::io(p, e))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let e: IdMapEntry = serde_json::from_str(&line).map_err(|e| IngestError::Parse {
                        path: p.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    linker.id_map.insert((e.dataset, e.image_id), e.canonical_id);
                }
            }
        }
        Ok(linker)
    }

    pub fn with_namespace(mut self, dataset: &str, namespace: &str) -> Self {
        self.namespaces.insert(dataset.into(), namespace.into());
        self
    }

    pub fn with_mapping(mut self, dataset: &str, image_id: &str, canonical: &str) -> Self {
        self.id_map.insert((dataset.into(), image_id.into()), canonical.into());
        self
    }

    pub fn namespace_of(&self, dataset: &str) -> &str {
        self.namespaces.get(dataset).map(String::as_str).unwrap_or(FILE_STEM)
    }

    pub fn key_for(&self, image: &ImageRef) -> LinkKey {
        let ns = self.namespace_of(&image.dataset_id);
        match self.id_map.get(&(image.dataset_id.clone(), image.image_id.clone())) {
            Some(c) => LinkKey {
                namespace: ns.to_string(),
                canonical_id: c.clone(),
            },
            None => link_key(image, ns),
        }
    }
}

/// Bundles and warnings read from one manifest.
#[derive(Debug, Default)]
pub struct LoadedManifest {
    pub bundles: Vec<MetadataBundle>,
    pub warnings: Vec<Warning>,
}

/// Reads a unified JSON Lines manifest. Mask fields of the form `@path`
/// are read from a sidecar file relative to the manifest.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest, IngestError> {
    let f = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = LoadedManifest::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| IngestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (bundle, warnings) = parse_line(&line, &base).map_err(|message| IngestError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.bundles.push(bundle);
        out.warnings.extend(warnings);
    }
    Ok(out)
}

fn parse_line(line: &str, base: &Path) -> Result<(MetadataBundle, Vec<Warning>), String> {
    let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.into_bundle_with(|raw| resolve_mask(raw, base))
        .map_err(|e| e.to_string())
}

fn resolve_mask(raw: &str, base: &Path) -> Result<RleMask, String> {
    match raw.strip_prefix('@') {
        Some(rel) => {
            let p = base.join(rel);
            let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            text.parse().map_err(|e: crate::mask::MaskError| e.to_string())
        }
        None => raw.parse().map_err(|e: crate::mask::MaskError| e.to_string()),
    }
}

/// One problem found by [`lint_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LintIssue {
    pub line: usize,
    pub severity: &'static str,
    pub message: String,
}

/// Checks every line of a manifest without stopping at the first error.
pub fn lint_manifest(path: &Path) -> Result<Vec<LintIssue>, IngestError> {
    let f = File::open(path).map_err(|e| IngestError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut issues = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| IngestError::io(path, e))?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line, &base) {
            Err(message) => issues.push(LintIssue {
                line: n,
                severity: "error",
                message,
            }),
            Ok((bundle, warnings)) => {
                let id = (bundle.image.dataset_id.clone(), bundle.image.image_id.clone());
                if let Some(prev) = seen.insert(id.clone(), n) {
                    issues.push(LintIssue {
                        line: n,
                        severity: "error",
                        message: format!("duplicate image {}/{} (first on line {prev})", id.0, id.1),
                    });
                }
                if !bundle.is_admissible() {
                    issues.push(LintIssue {
                        line: n,
                        severity: "warning",
                        message: "record has no usable annotations".into(),
                    });
                }
                issues.extend(warnings.into_iter().map(|w| LintIssue {
                    line: n,
                    severity: "warning",
                    message: w.message,
                }));
            }
        }
    }
    Ok(issues)
}

/// Loads every registered manifest in parallel. Results follow registry order.
pub fn load_registry_manifests(reg: &Registry) -> Result<LoadedManifest, IngestError> {
    let descriptors: Vec<&DatasetDescriptor> = reg.descriptors().collect();
    let loaded: Vec<Result<LoadedManifest, IngestError>> = descriptors
        .par_iter()
        .map(|d| load_manifest(&d.manifest_path))
        .collect();
    let mut out = LoadedManifest::default();
    for part in loaded {
        let part = part?;
        out.bundles.extend(part.bundles);
        out.warnings.extend(part.warnings);
    }
    Ok(out)
}

type SortKey = (LinkKey, String, String, u64);

#[derive(Serialize, Deserialize)]
struct SpilledRecord {
    key: LinkKey,
    seq: u64,
    record: ManifestRecord,
}

/// Per-category counts reported by the grouper.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GroupStats {
    pub records_in: u64,
    pub groups_out: u64,
    pub runs_spilled: u64,
}

/// Groups bundles by link key without holding the whole corpus in memory.
///
/// Records are buffered up to `run_capacity`; full buffers are sorted by
/// link key and spilled to temporary JSON Lines runs, which are then k-way
/// merged. Within a key, records fold in `(dataset_id, image_id, arrival)`
/// order, so output does not depend on input order.
pub struct ExternalGrouper<'a> {
    linker: &'a Linker,
    run_capacity: usize,
    spill_dir: Option<PathBuf>,
    buffer: Vec<(SortKey, MetadataBundle)>,
    runs: Vec<tempfile::NamedTempFile>,
    seq: u64,
}

impl<'a> ExternalGrouper<'a> {
    pub fn new(linker: &'a Linker, run_capacity: usize) -> Self {
        Self {
            linker,
            run_capacity: run_capacity.max(1),
            spill_dir: None,
            buffer: Vec::new(),
            runs: Vec::new(),
            seq: 0,
        }
    }

    pub fn spill_to(mut self, dir: impl Into<PathBuf>) -> Self {
        self.spill_dir = Some(dir.into());
        self
    }

    pub fn push(&mut self, bundle: MetadataBundle) -> Result<(), IngestError> {
        let key = (
            self.linker.key_for(&bundle.image),
            bundle.image.dataset_id.clone(),
            bundle.image.image_id.clone(),
            self.seq,
        );
        self.seq += 1;
        self.buffer.push((key, bundle));
        if self.buffer.len() >= self.run_capacity {
            self.spill()?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<(), IngestError> {
        self.buffer.sort_by(|a, b| a.0.cmp(&b.0));
        let file = match &self.spill_dir {
            Some(d) => tempfile::NamedTempFile::new_in(d),
            None => tempfile::NamedTempFile::new(),
        }
        .map_err(|e| IngestError::io(Path::new("<spill>"), e))?;
        let path = file.path().to_path_buf();
        let mut w = BufWriter::new(file.reopen().map_err(|e| IngestError::io(&path, e))?);
        for (key, bundle) in self.buffer.drain(..) {
            let rec = SpilledRecord {
                key: key.0,
                seq: key.3,
                record: bundle.to_record(),
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| IngestError::Parse {
                path: path.clone(),
                line: 0,
                message: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(|e| IngestError::io(&path, e))?;
        }
        w.flush().map_err(|e| IngestError::io(&path, e))?;
        self.runs.push(file);
        Ok(())
    }

    /// Emits one merged bundle per link key, in key order.
    pub fn finish(
        mut self,
        mut sink: impl FnMut(LinkKey, MetadataBundle) -> Result<(), IngestError>,
    ) -> Result<GroupStats, IngestError> {
        let mut stats = GroupStats {
            records_in: self.seq,
            ..Default::default()
        };
        let mut fold = Folder::default();
        if self.runs.is_empty() {
            self.buffer.sort_by(|a, b| a.0.cmp(&b.0));
            for (key, bundle) in std::mem::take(&mut self.buffer) {
                fold.feed(key.0, bundle, &mut sink, &mut stats)?;
            }
        } else {
            if !self.buffer.is_empty() {
                self.spill()?;
            }
            stats.runs_spilled = self.runs.len() as u64;
            let mut readers = Vec::new();
            for run in &self.runs {
                let path = run.path().to_path_buf();
                let f = run.reopen().map_err(|e| IngestError::io(&path, e))?;
                readers.push((path, BufReader::new(f).lines()));
            }
            let mut heap: BinaryHeap<Reverse<(SortKey, usize)>> = BinaryHeap::new();
            let mut pending: Vec<Option<MetadataBundle>> = vec![None; readers.len()];
            for i in 0..readers.len() {
                if let Some((k, b)) = next_spilled(&mut readers[i])? {
                    pending[i] = Some(b);
                    heap.push(Reverse((k, i)));
                }
            }
            while let Some(Reverse((key, i))) = heap.pop() {
                let bundle = pending[i].take().expect("pending record for run");
                if let Some((k, b)) = next_spilled(&mut readers[i])? {
                    pending[i] = Some(b);
                    heap.push(Reverse((k, i)));
                }
                fold.feed(key.0, bundle, &mut sink, &mut stats)?;
            }
        }
        fold.flush(&mut sink, &mut stats)?;
        Ok(stats)
    }
}

fn next_spilled(
    reader: &mut (PathBuf, std::io::Lines<BufReader<File>>),
) -> Result<Option<(SortKey, MetadataBundle)>, IngestError> {
    let Some(line) = reader.1.next() else {
        return Ok(None);
    };
    let line = line.map_err(|e| IngestError::io(&reader.0, e))?;
    let parse_err = |message: String| IngestError::Parse {
        path: reader.0.clone(),
        line: 0,
        message,
    };
    let rec: SpilledRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
    let (bundle, _) = rec.record.into_bundle()?;
    let key = (
        rec.key,
        bundle.image.dataset_id.clone(),
        bundle.image.image_id.clone(),
        rec.seq,
    );
    Ok(Some((key, bundle)))
}

#[derive(Default)]
struct Folder {
    current: Option<(LinkKey, MetadataBundle)>,
}

impl Folder {
    fn feed(
        &mut self,
        key: LinkKey,
        bundle: MetadataBundle,
        sink: &mut impl FnMut(LinkKey, MetadataBundle) -> Result<(), IngestError>,
        stats: &mut GroupStats,
    ) -> Result<(), IngestError> {
        match self.current.take() {
            Some((k, acc)) if k == key => {
                let merged = merge_unchecked(&acc, &bundle, &k.to_string())?;
                self.current = Some((k, merged));
            }
            other => {
                if let Some((k, acc)) = other {
                    stats.groups_out += 1;
                    sink(k, acc)?;
                }
                // Merging with an empty bundle drops duplicates inside the
                // first record, as later merges would.
                let empty = MetadataBundle::new(bundle.image.clone());
                let first = merge_unchecked(&bundle, &empty, &key.to_string())?;
                self.current = Some((key, first));
            }
        }
        Ok(())
    }

    fn flush(
        &mut self,
        sink: &mut impl FnMut(LinkKey, MetadataBundle) -> Result<(), IngestError>,
        stats: &mut GroupStats,
    ) -> Result<(), IngestError> {
        if let Some((k, acc)) = self.current.take() {
            stats.groups_out += 1;
            sink(k, acc)?;
        }
        Ok(())
    }
}

/// In-memory convenience over [`ExternalGrouper`].
pub fn group_by_image(
    records: impl IntoIterator<Item = MetadataBundle>,
    linker: &Linker,
) -> Result<Vec<MetadataBundle>, IngestError> {
    let mut g = ExternalGrouper::new(linker, usize::MAX);
    for r in records {
        g.push(r)?;
    }
    let mut out = Vec::new();
    g.finish(|_, b| {
        out.push(b);
        Ok(())
    })?;
    Ok(out)
}
