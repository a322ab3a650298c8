//! Unified, provenance-preserving annotation model.
//!
//! Every dataset is normalized into [`MetadataBundle`]s: one image plus its
//! captions, boxes and QA pairs. Each annotation keeps the id of the dataset
//! it came from in `source`, and that field survives every merge.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::Linker;
use crate::mask::{MaskError, RleMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetadataError {
    #[error("cannot merge bundles for different images ({left} vs {right})")]
    MismatchedImage { left: String, right: String },
    #[error("image {key}: dimensions {a_w}x{a_h} and {b_w}x{b_h} disagree by more than 1px")]
    DimensionConflict {
        key: String,
        a_w: u32,
        a_h: u32,
        b_w: u32,
        b_h: u32,
    },
    #[error("box `{label}` has zero area after clamping to the image")]
    DegenerateBox { label: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid mask: {0}")]
    InvalidMask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub dataset_id: String,
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn new(dataset_id: &str, image_id: &str, uri: &str, width: u32, height: u32) -> Self {
        Self {
            dataset_id: dataset_id.to_string(),
            image_id: image_id.to_string(),
            uri: uri.to_string(),
            width,
            height,
        }
    }
}

/// Axis-aligned box in pixels, top-left origin. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box covering both.
    pub fn hull(&self, other: &BBox) -> BBox {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Pixel rectangle `[x0, x1) x [y0, y1)` touched by this box.
    pub fn pixel_bounds(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let clip = |v: f64, max: u32| v.clamp(0.0, max as f64) as u32;
        (
            clip(self.x.floor(), width),
            clip(self.y.floor(), height),
            clip(self.right().ceil(), width),
            clip(self.bottom().ceil(), height),
        )
    }

    pub fn to_mask(&self, width: u32, height: u32) -> RleMask {
        let (x0, y0, x1, y1) = self.pixel_bounds(width, height);
        RleMask::from_rect(width, height, x0, y0, x1, y1)
    }

    fn total_cmp(&self, other: &BBox) -> Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionAnnotation {
    pub text: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxAnnotation {
    pub label: String,
    pub bbox: BBox,
    pub attributes: Vec<String>,
    pub mask: Option<RleMask>,
    pub depth_mean: Option<f64>,
    pub source: String,
}

impl BoxAnnotation {
    pub fn new(label: &str, bbox: BBox, source: &str) -> Self {
        Self {
            label: label.to_string(),
            bbox,
            attributes: Vec::new(),
            mask: None,
            depth_mean: None,
            source: source.to_string(),
        }
    }

    pub fn with_attributes(mut self, attrs: &[&str]) -> Self {
        self.attributes = attrs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_depth(mut self, depth: f64) -> Self {
        self.depth_mean = Some(depth);
        self
    }

    pub fn with_mask(mut self, mask: RleMask) -> Self {
        self.mask = Some(mask);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaAnnotation {
    pub question: String,
    pub answer: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetadataBundle {
    pub image: ImageRef,
    pub captions: Vec<CaptionAnnotation>,
    pub boxes: Vec<BoxAnnotation>,
    pub qas: Vec<QaAnnotation>,
}

impl MetadataBundle {
    pub fn new(image: ImageRef) -> Self {
        Self {
            image,
            captions: Vec::new(),
            boxes: Vec::new(),
            qas: Vec::new(),
        }
    }

    /// A bundle is admitted to generation when it carries any annotation.
    pub fn is_admissible(&self) -> bool {
        !(self.captions.is_empty() && self.boxes.is_empty() && self.qas.is_empty())
    }

    pub fn annotation_count(&self) -> usize {
        self.captions.len() + self.boxes.len() + self.qas.len()
    }

    /// Order-insensitive form: every list fully sorted by content. Two bundles
    /// holding the same annotations canonicalize identically regardless of the
    /// order in which they were merged.
    pub fn canonicalized(&self) -> MetadataBundle {
        let mut out = self.clone();
        out.captions
            .sort_by(|a, b| (&a.source, &a.text).cmp(&(&b.source, &b.text)));
        out.boxes.sort_by(|a, b| {
            a.source
                .cmp(&b.source)
                .then_with(|| a.label.cmp(&b.label))
                .then_with(|| a.bbox.total_cmp(&b.bbox))
                .then_with(|| a.attributes.cmp(&b.attributes))
                .then_with(|| cmp_opt_f64(a.depth_mean, b.depth_mean))
                .then_with(|| {
                    let ma = a.mask.as_ref().map(|m| m.to_string());
                    let mb = b.mask.as_ref().map(|m| m.to_string());
                    ma.cmp(&mb)
                })
        });
        out.qas
            .sort_by(|a, b| (&a.source, &a.question, &a.answer).cmp(&(&b.source, &b.question, &b.answer)));
        out
    }

    pub fn to_record(&self) -> ManifestRecord {
        ManifestRecord::from(self)
    }
}

fn cmp_opt_f64(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
    }
}

/// Non-fatal finding produced while normalizing a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub dataset: String,
    pub image_id: String,
    pub message: String,
}

/// One line of the unified JSON Lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub dataset: String,
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub captions: Vec<CaptionAnnotation>,
    #[serde(default)]
    pub boxes: Vec<BoxRecord>,
    #[serde(default)]
    pub qas: Vec<QaAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub label: String,
    pub bbox: BBox,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub mask_rle: Option<String>,
    #[serde(default)]
    pub depth_mean: Option<f64>,
    #[serde(default)]
    pub source: String,
}

impl From<&MetadataBundle> for ManifestRecord {
    fn from(b: &MetadataBundle) -> Self {
        ManifestRecord {
            dataset: b.image.dataset_id.clone(),
            image_id: b.image.image_id.clone(),
            uri: b.image.uri.clone(),
            width: b.image.width,
            height: b.image.height,
            captions: b.captions.clone(),
            boxes: b
                .boxes
                .iter()
                .map(|bx| BoxRecord {
                    label: bx.label.clone(),
                    bbox: bx.bbox,
                    attributes: bx.attributes.clone(),
                    mask_rle: bx.mask.as_ref().map(|m| m.to_string()),
                    depth_mean: bx.depth_mean,
                    source: bx.source.clone(),
                })
                .collect(),
            qas: b.qas.clone(),
        }
    }
}

impl ManifestRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("manifest record serializes")
    }

    /// Normalizes the record into a bundle.
    ///
    /// Structural problems (zero dimensions) are errors. Individual
    /// annotations that cannot be used are dropped and reported as warnings:
    /// empty captions or QA fields, boxes lying fully outside the frame,
    /// masks that disagree with the image grid, depth outside `[0, 1]`.
    /// Partially visible boxes are clamped. Missing `source` fields default to
    /// the record's dataset.
    pub fn into_bundle(self) -> Result<(MetadataBundle, Vec<Warning>), MetadataError> {
        self.into_bundle_with(|s| s.parse::<RleMask>().map_err(|e| e.to_string()))
    }

    /// Like [`into_bundle`](Self::into_bundle) with a custom mask resolver,
    /// used to follow sidecar references.
    pub fn into_bundle_with(
        self,
        mut resolve_mask: impl FnMut(&str) -> Result<RleMask, String>,
    ) -> Result<(MetadataBundle, Vec<Warning>), MetadataError> {
        if self.width == 0 || self.height == 0 {
            return Err(MetadataError::InvalidRecord(format!(
                "{}/{}: image dimensions must be positive",
                self.dataset, self.image_id
            )));
        }
        if self.dataset.trim().is_empty() || self.image_id.trim().is_empty() {
            return Err(MetadataError::InvalidRecord(
                "dataset and image_id must be non-empty".into(),
            ));
        }
        let image = ImageRef {
            dataset_id: self.dataset.clone(),
            image_id: self.image_id.clone(),
            uri: self.uri,
            width: self.width,
            height: self.height,
        };
        let mut warnings = Vec::new();
        let mut warn = |msg: String| {
            warnings.push(Warning {
                dataset: image.dataset_id.clone(),
                image_id: image.image_id.clone(),
                message: msg,
            })
        };
        let fill = |s: String| {
            if s.trim().is_empty() {
                image.dataset_id.clone()
            } else {
                s
            }
        };

        let mut bundle = MetadataBundle::new(image.clone());
        for c in self.captions {
            if c.text.trim().is_empty() {
                warn("dropped empty caption".into());
                continue;
            }
            bundle.captions.push(CaptionAnnotation {
                text: c.text,
                source: fill(c.source),
            });
        }
        for q in self.qas {
            if q.question.trim().is_empty() || q.answer.trim().is_empty() {
                warn("dropped QA pair with empty field".into());
                continue;
            }
            bundle.qas.push(QaAnnotation {
                question: q.question,
                answer: q.answer,
                source: fill(q.source),
            });
        }
        for b in self.boxes {
            if !(b.bbox.w > 0.0 && b.bbox.h > 0.0) {
                warn(format!("dropped box `{}` with non-positive size", b.label));
                continue;
            }
            let mut ann = BoxAnnotation {
                label: b.label,
                bbox: b.bbox,
                attributes: b.attributes,
                mask: None,
                depth_mean: b.depth_mean,
                source: fill(b.source),
            };
            ann = match clamp_box(&ann, &image) {
                Ok(c) => c,
                Err(_) => {
                    warn(format!("dropped box `{}` outside the image", ann.label));
                    continue;
                }
            };
            if let Some(d) = ann.depth_mean {
                if !(0.0..=1.0).contains(&d) {
                    warn(format!("dropped depth {d} of box `{}`", ann.label));
                    ann.depth_mean = None;
                }
            }
            if let Some(raw) = b.mask_rle.as_deref() {
                match resolve_mask(raw) {
                    Ok(m) if m.width() != image.width || m.height() != image.height => warn(format!(
                        "dropped mask of box `{}`: grid does not match image",
                        ann.label
                    )),
                    Ok(m) if m.is_empty() => warn(format!("dropped empty mask of box `{}`", ann.label)),
                    Ok(m) => ann.mask = Some(m),
                    Err(e) => warn(format!("dropped mask of box `{}`: {e}", ann.label)),
                }
            }
            bundle.boxes.push(ann);
        }
        Ok((bundle, warnings))
    }
}

/// Intersects the box with the image frame.
pub fn clamp_box(b: &BoxAnnotation, image: &ImageRef) -> Result<BoxAnnotation, MetadataError> {
    let x0 = b.bbox.x.max(0.0);
    let y0 = b.bbox.y.max(0.0);
    let x1 = b.bbox.right().min(image.width as f64);
    let y1 = b.bbox.bottom().min(image.height as f64);
    if x1 <= x0 || y1 <= y0 {
        return Err(MetadataError::DegenerateBox { label: b.label.clone() });
    }
    let mut out = b.clone();
    out.bbox = BBox::new(x0, y0, x1 - x0, y1 - y0);
    Ok(out)
}

/// Unions the annotations of two bundles describing the same picture.
///
/// Exact duplicates (annotations equal in every field) are kept once. Each
/// list is stably sorted by source, so within a source the original order is
/// preserved. The merged image reference is the
/// lexicographically smallest `(dataset_id, image_id)` of the two.
pub fn merge_bundles(a: &MetadataBundle, b: &MetadataBundle, linker: &Linker) -> Result<MetadataBundle, MetadataError> {
    let (ka, kb) = (linker.key_for(&a.image), linker.key_for(&b.image));
    if ka != kb {
        return Err(MetadataError::MismatchedImage {
            left: ka.to_string(),
            right: kb.to_string(),
        });
    }
    merge_unchecked(a, b, &ka.to_string())
}

pub(crate) fn merge_unchecked(
    a: &MetadataBundle,
    b: &MetadataBundle,
    key: &str,
) -> Result<MetadataBundle, MetadataError> {
    let (ia, ib) = (&a.image, &b.image);
    if ia.width.abs_diff(ib.width) > 1 || ia.height.abs_diff(ib.height) > 1 {
        return Err(MetadataError::DimensionConflict {
            key: key.to_string(),
            a_w: ia.width,
            a_h: ia.height,
            b_w: ib.width,
            b_h: ib.height,
        });
    }
    let image = if (&ia.dataset_id, &ia.image_id) <= (&ib.dataset_id, &ib.image_id) {
        ia.clone()
    } else {
        ib.clone()
    };

    let mut captions: Vec<CaptionAnnotation> = Vec::new();
    for c in a.captions.iter().chain(&b.captions) {
        if !captions.iter().any(|x| x.text == c.text && x.source == c.source) {
            captions.push(c.clone());
        }
    }
    let mut boxes: Vec<BoxAnnotation> = Vec::new();
    for bx in a.boxes.iter().chain(&b.boxes) {
        if !boxes.contains(bx) {
            boxes.push(bx.clone());
        }
    }
    let mut qas: Vec<QaAnnotation> = Vec::new();
    for q in a.qas.iter().chain(&b.qas) {
        if !qas.contains(q) {
            qas.push(q.clone());
        }
    }
    captions.sort_by(|x, y| x.source.cmp(&y.source));
    boxes.sort_by(|x, y| x.source.cmp(&y.source));
    qas.sort_by(|x, y| x.source.cmp(&y.source));

    Ok(MetadataBundle {
        image,
        captions,
        boxes,
        qas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(ds: &str, id: &str) -> ImageRef {
        ImageRef::new(ds, id, &format!("/data/{id}.jpg"), 100, 100)
    }

    fn coco_bundle() -> MetadataBundle {
        let mut b = MetadataBundle::new(img("coco", "000000123"));
        b.captions.push(CaptionAnnotation {
            text: "A cat on a sofa.".into(),
            source: "coco".into(),
        });
        b.captions.push(CaptionAnnotation {
            text: "A sleeping cat.".into(),
            source: "coco".into(),
        });
        b
    }

    fn vg_bundle() -> MetadataBundle {
        let mut b = MetadataBundle::new(img("vg", "000000123"));
        for (i, l) in ["cat", "sofa", "pillow"].iter().enumerate() {
            b.boxes
                .push(BoxAnnotation::new(l, BBox::new(i as f64 * 10.0, 0.0, 20.0, 20.0), "vg"));
        }
        b
    }

    #[test]
    fn merges_captions_with_boxes() {
        let linker = Linker::default();
        let m = merge_bundles(&coco_bundle(), &vg_bundle(), &linker).unwrap();
        assert_eq!(m.captions.len(), 2);
        assert_eq!(m.boxes.len(), 3);
        assert!(m.captions.iter().all(|c| c.source == "coco"));
        assert!(m.boxes.iter().all(|b| b.source == "vg"));
        assert_eq!(m.image.dataset_id, "coco");
    }

    #[test]
    fn empty_is_identity_and_self_merge_is_idempotent() {
        let linker = Linker::default();
        let a = coco_bundle();
        let empty = MetadataBundle::new(a.image.clone());
        assert_eq!(merge_bundles(&a, &empty, &linker).unwrap(), a);
        assert_eq!(merge_bundles(&a, &a, &linker).unwrap(), a);
    }

    #[test]
    fn rejects_mismatch_and_dimension_conflicts() {
        let linker = Linker::default();
        let a = coco_bundle();
        let other = MetadataBundle::new(img("vg", "999"));
        assert!(matches!(
            merge_bundles(&a, &other, &linker),
            Err(MetadataError::MismatchedImage { .. })
        ));
        let mut off_by_one = vg_bundle();
        off_by_one.image.width = 101;
        assert!(merge_bundles(&a, &off_by_one, &linker).is_ok());
        let mut off_by_two = vg_bundle();
        off_by_two.image.height = 102;
        assert!(matches!(
            merge_bundles(&a, &off_by_two, &linker),
            Err(MetadataError::DimensionConflict { .. })
        ));
    }

    #[test]
    fn clamp_cases() {
        let image = ImageRef::new("d", "i", "i.jpg", 100, 100);
        let b = BoxAnnotation::new("x", BBox::new(-5.0, -5.0, 20.0, 20.0), "d");
        assert_eq!(clamp_box(&b, &image).unwrap().bbox, BBox::new(0.0, 0.0, 15.0, 15.0));
        let inside = BoxAnnotation::new("x", BBox::new(10.0, 10.0, 20.0, 20.0), "d");
        assert_eq!(clamp_box(&inside, &image).unwrap(), inside);
        let outside = BoxAnnotation::new("x", BBox::new(120.0, 120.0, 10.0, 10.0), "d");
        assert!(matches!(
            clamp_box(&outside, &image),
            Err(MetadataError::DegenerateBox { .. })
        ));
    }

    #[test]
    fn record_normalization_drops_and_warns() {
        let line = r#"{"dataset":"vg","image_id":"7","uri":"7.jpg","width":10,"height":10,
            "captions":[{"text":"  ","source":"vg"},{"text":"ok","source":""}],
            "boxes":[{"label":"a","bbox":[-2,0,5,5],"attributes":["red"],"mask_rle":null,"depth_mean":0.3,"source":"vg"},
                     {"label":"b","bbox":[50,50,5,5],"attributes":[],"mask_rle":null,"depth_mean":null,"source":"vg"},
                     {"label":"c","bbox":[0,0,5,5],"attributes":[],"mask_rle":"3x3:9","depth_mean":1.5,"source":"vg"}],
            "qas":[{"question":"q?","answer":"","source":"vg"}]}"#;
        let rec: ManifestRecord = serde_json::from_str(line).unwrap();
        let (b, w) = rec.into_bundle().unwrap();
        assert_eq!(b.captions.len(), 1);
        assert_eq!(b.captions[0].source, "vg");
        assert_eq!(b.boxes.len(), 2);
        assert_eq!(b.boxes[0].bbox, BBox::new(0.0, 0.0, 3.0, 5.0));
        assert!(b.boxes[1].mask.is_none() && b.boxes[1].depth_mean.is_none());
        assert!(b.qas.is_empty());
        assert_eq!(w.len(), 5, "{w:?}");
    }

    #[test]
    fn bundle_record_round_trip() {
        let mut b = vg_bundle();
        b.boxes[0].mask = Some(BBox::new(0.0, 0.0, 20.0, 20.0).to_mask(100, 100));
        b.boxes[0].depth_mean = Some(0.25);
        b.boxes[0].attributes = vec!["striped".into()];
        b.qas.push(QaAnnotation {
            question: "What is it?".into(),
            answer: "A cat".into(),
            source: "vg".into(),
        });
        let line = b.to_record().to_json_line();
        let rec: ManifestRecord = serde_json::from_str(&line).unwrap();
        let (back, warnings) = rec.into_bundle().unwrap();
        assert!(warnings.is_empty());
        assert_eq!(back, b);
    }
}
