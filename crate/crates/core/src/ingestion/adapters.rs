//! Converters from a few public dataset formats into the unified manifest.
//!
//! An adapter only has to produce [`ManifestRecord`]s; everything after that
//! (validation, clamping, linking, grouping) is shared. Adding a dataset
//! means implementing [`DatasetAdapter`] and registering the manifest it
//! writes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::IngestError;
use crate::metadata::{BBox, BoxRecord, CaptionAnnotation, ManifestRecord, QaAnnotation};

pub trait DatasetAdapter {
    fn dataset_id(&self) -> &str;
    fn records(&self) -> Result<Vec<ManifestRecord>, IngestError>;
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IngestError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes records as JSON Lines.
pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<(), IngestError> {
    let f = File::create(path).map_err(|e| IngestError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| IngestError::io(path, e))?;
    }
    w.flush().map_err(|e| IngestError::io(path, e))
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoCaption {
    image_id: u64,
    caption: String,
}

#[derive(Deserialize)]
struct CocoCaptionFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoCaption>,
}

/// COCO Captions `captions_*.json`.
pub struct CocoCaptions {
    pub dataset_id: String,
    pub annotations: PathBuf,
    pub image_root: String,
}

impl DatasetAdapter for CocoCaptions {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    fn records(&self) -> Result<Vec<ManifestRecord>, IngestError> {
        let file: CocoCaptionFile = read_json(&self.annotations)?;
        let mut by_id: BTreeMap<u64, ManifestRecord> = file
            .images
            .into_iter()
            .map(|im| {
                let rec = ManifestRecord {
                    dataset: self.dataset_id.clone(),
                    image_id: im.id.to_string(),
                    uri: join_uri(&self.image_root, &im.file_name),
                    width: im.width,
                    height: im.height,
                    captions: Vec::new(),
                    boxes: Vec::new(),
                    qas: Vec::new(),
                };
                (im.id, rec)
            })
            .collect();
        for a in file.annotations {
            if let Some(r) = by_id.get_mut(&a.image_id) {
                r.captions.push(CaptionAnnotation {
                    text: a.caption.trim().to_string(),
                    source: self.dataset_id.clone(),
                });
            }
        }
        Ok(by_id.into_values().filter(|r| !r.captions.is_empty()).collect())
    }
}

#[derive(Deserialize)]
struct VgImage {
    image_id: u64,
    url: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct VgObject {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    names: Vec<String>,
    #[serde(default)]
    attributes: Vec<String>,
}

#[derive(Deserialize)]
struct VgObjects {
    image_id: u64,
    objects: Vec<VgObject>,
}

/// Visual Genome `image_data.json` plus `objects.json` / `attributes.json`.
pub struct VisualGenomeObjects {
    pub dataset_id: String,
    pub image_data: PathBuf,
    pub objects: PathBuf,
}

impl DatasetAdapter for VisualGenomeObjects {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    fn records(&self) -> Result<Vec<ManifestRecord>, IngestError> {
        let images: Vec<VgImage> = read_json(&self.image_data)?;
        let objects: Vec<VgObjects> = read_json(&self.objects)?;
        let mut by_id: BTreeMap<u64, ManifestRecord> = images
            .into_iter()
            .map(|im| {
                let rec = ManifestRecord {
                    dataset: self.dataset_id.clone(),
                    image_id: im.image_id.to_string(),
                    uri: im.url,
                    width: im.width,
                    height: im.height,
                    captions: Vec::new(),
                    boxes: Vec::new(),
                    qas: Vec::new(),
                };
                (im.image_id, rec)
            })
            .collect();
        for entry in objects {
            let Some(r) = by_id.get_mut(&entry.image_id) else {
                continue;
            };
            for o in entry.objects {
                let Some(label) = o.names.first() else { continue };
                r.boxes.push(BoxRecord {
                    label: label.trim().to_string(),
                    bbox: BBox::new(o.x, o.y, o.w, o.h),
                    attributes: o.attributes.iter().map(|a| a.trim().to_string()).collect(),
                    mask_rle: None,
                    depth_mean: None,
                    source: self.dataset_id.clone(),
                });
            }
        }
        Ok(by_id.into_values().filter(|r| !r.boxes.is_empty()).collect())
    }
}

#[derive(Deserialize)]
struct VqaEntry {
    image_id: u64,
    question: String,
    answer: String,
}

#[derive(Deserialize)]
struct VqaFile {
    images: Vec<CocoImage>,
    questions: Vec<VqaEntry>,
}

/// Flattened VQA-style file: COCO image list plus `{image_id, question, answer}`.
pub struct VqaPairs {
    pub dataset_id: String,
    pub path: PathBuf,
    pub image_root: String,
}

impl DatasetAdapter for VqaPairs {
    fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    fn records(&self) -> Result<Vec<ManifestRecord>, IngestError> {
        let file: VqaFile = read_json(&self.path)?;
        let mut by_id: BTreeMap<u64, ManifestRecord> = file
            .images
            .into_iter()
            .map(|im| {
                let rec = ManifestRecord {
                    dataset: self.dataset_id.clone(),
                    image_id: im.id.to_string(),
                    uri: join_uri(&self.image_root, &im.file_name),
                    width: im.width,
                    height: im.height,
                    captions: Vec::new(),
                    boxes: Vec::new(),
                    qas: Vec::new(),
                };
                (im.id, rec)
            })
            .collect();
        for q in file.questions {
            if let Some(r) = by_id.get_mut(&q.image_id) {
                r.qas.push(QaAnnotation {
                    question: q.question,
                    answer: q.answer,
                    source: self.dataset_id.clone(),
                });
            }
        }
        Ok(by_id.into_values().filter(|r| !r.qas.is_empty()).collect())
    }
}

fn join_uri(root: &str, name: &str) -> String {
    if root.is_empty() {
        name.to_string()
    } else {
        format!("{}/{}", root.trim_end_matches('/'), name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{group_by_image, Linker};

    #[test]
    fn coco_vg_and_vqa_link_by_file_stem() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        std::fs::write(
            p.join("captions.json"),
            r#"{"images":[{"id":9,"file_name":"000000000009.jpg","width":640,"height":480}],
                "annotations":[{"image_id":9,"caption":"Food in a bowl. "},{"image_id":9,"caption":"A meal."}]}"#,
        )
        .unwrap();
        std::fs::write(
            p.join("image_data.json"),
            r#"[{"image_id":1,"url":"http://vg/images/000000000009.jpg","width":640,"height":480}]"#,
        )
        .unwrap();
        std::fs::write(
            p.join("objects.json"),
            r#"[{"image_id":1,"objects":[{"x":10,"y":20,"w":100,"h":50,"names":["bowl"],"attributes":["white"]}]}]"#,
        )
        .unwrap();
        std::fs::write(
            p.join("vqa.json"),
            r#"{"images":[{"id":9,"file_name":"000000000009.jpg","width":640,"height":480}],
                "questions":[{"image_id":9,"question":"What color is the bowl?","answer":"white"}]}"#,
        )
        .unwrap();

        let coco = CocoCaptions {
            dataset_id: "coco".into(),
            annotations: p.join("captions.json"),
            image_root: "coco/train2017".into(),
        };
        let vg = VisualGenomeObjects {
            dataset_id: "vg".into(),
            image_data: p.join("image_data.json"),
            objects: p.join("objects.json"),
        };
        let vqa = VqaPairs {
            dataset_id: "vqa".into(),
            path: p.join("vqa.json"),
            image_root: "".into(),
        };
        let mut bundles = Vec::new();
        for a in [&coco as &dyn DatasetAdapter, &vg, &vqa] {
            let recs = a.records().unwrap();
            let path = p.join(format!("{}.jsonl", a.dataset_id()));
            write_manifest(&recs, &path).unwrap();
            bundles.extend(crate::ingestion::load_manifest(&path).unwrap().bundles);
        }
        let grouped = group_by_image(bundles, &Linker::default()).unwrap();
        assert_eq!(grouped.len(), 1);
        let g = &grouped[0];
        assert_eq!((g.captions.len(), g.boxes.len(), g.qas.len()), (2, 1, 1));
        assert_eq!(g.captions[0].text, "Food in a bowl.");
        assert_eq!(g.boxes[0].attributes, vec!["white".to_string()]);
    }
}
