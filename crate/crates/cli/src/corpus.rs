//! Synthetic multi-dataset corpus for tests, demos and the bench.
//!
//! Three datasets describe overlapping images under different file naming:
//! captions, detections (boxes with attributes, depth and some masks) and
//! visual QA. All three link by lowercase file stem.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenechat_core::ingestion::adapters::write_manifest;
use scenechat_core::ingestion::{DatasetDescriptor, DatasetKind, IngestError, FILE_STEM};
use scenechat_core::metadata::{BBox, BoxRecord, CaptionAnnotation, ManifestRecord, QaAnnotation};
use scenechat_core::scene::pluralize;

struct Theme {
    name: &'static str,
    container: &'static str,
    inside: &'static [&'static str],
    loose: &'static [&'static str],
}

const THEMES: [Theme; 5] = [
    Theme {
        name: "kitchen",
        container: "table",
        inside: &["cup", "plate", "apple", "bowl", "knife"],
        loose: &["chair", "refrigerator", "oven"],
    },
    Theme {
        name: "street",
        container: "bus",
        inside: &["window", "person", "wheel"],
        loose: &["car", "traffic light", "bicycle", "dog"],
    },
    Theme {
        name: "park",
        container: "bench",
        inside: &["bag", "book", "bird"],
        loose: &["tree", "dog", "kite", "person"],
    },
    Theme {
        name: "office",
        container: "desk",
        inside: &["laptop", "mug", "book", "pen"],
        loose: &["chair", "plant", "lamp"],
    },
    Theme {
        name: "living room",
        container: "sofa",
        inside: &["cushion", "cat", "remote"],
        loose: &["lamp", "television", "rug", "plant"],
    },
];

const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "yellow", "brown", "gray"];
const SIZES: [(u32, u32); 4] = [(640, 480), (800, 600), (1024, 768), (500, 375)];

fn stem(i: usize) -> String {
    format!("img_{i:05}")
}

/// Records of the three datasets for `n` images, deterministic in `seed`.
pub fn synthetic_records(n: usize, seed: u64) -> [Vec<ManifestRecord>; 3] {
    let mut caps = Vec::new();
    let mut dets = Vec::new();
    let mut qas = Vec::new();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64);
        let (w, h) = SIZES[rng.gen_range(0..SIZES.len())];
        let theme = &THEMES[rng.gen_range(0..THEMES.len())];
        let record = |dataset: &str, uri: String, image_id: String| ManifestRecord {
            dataset: dataset.into(),
            image_id,
            uri,
            width: w,
            height: h,
            captions: vec![],
            boxes: vec![],
            qas: vec![],
        };
        let (wf, hf) = (f64::from(w), f64::from(h));

        let mut boxes: Vec<BoxRecord> = Vec::new();
        let cw = wf * rng.gen_range(0.4..0.7);
        let ch = hf * rng.gen_range(0.35..0.6);
        let container = BBox::new(
            (rng.gen_range(0.0..(wf - cw))).round(),
            (rng.gen_range(0.0..(hf - ch))).round(),
            cw.round(),
            ch.round(),
        );
        let container_color = *COLORS.choose(&mut rng).unwrap();
        boxes.push(BoxRecord {
            label: theme.container.into(),
            bbox: container,
            attributes: vec![container_color.into()],
            mask_rle: Some(container.to_mask(w, h).to_string()),
            depth_mean: Some((rng.gen_range(0.4..0.8f64) * 100.0).round() / 100.0),
            source: "detections".into(),
        });

        let repeated = *theme.inside.choose(&mut rng).unwrap();
        let count = *[1usize, 2, 3, 5, 7, 11].choose(&mut rng).unwrap();
        let small = |rng: &mut ChaCha8Rng, within: &BBox| {
            let bw = (within.w * rng.gen_range(0.08..0.2)).max(4.0).round();
            let bh = (within.h * rng.gen_range(0.08..0.2)).max(4.0).round();
            BBox::new(
                (within.x + rng.gen_range(0.0..(within.w - bw))).round(),
                (within.y + rng.gen_range(0.0..(within.h - bh))).round(),
                bw,
                bh,
            )
        };
        for _ in 0..count {
            let b = small(&mut rng, &container);
            boxes.push(BoxRecord {
                label: repeated.into(),
                bbox: b,
                attributes: vec![],
                mask_rle: None,
                depth_mean: None,
                source: "detections".into(),
            });
        }
        let other = theme.inside.iter().find(|l| **l != repeated).copied().unwrap_or("item");
        let other_color = *COLORS.choose(&mut rng).unwrap();
        let ob = small(&mut rng, &container);
        boxes.push(BoxRecord {
            label: other.into(),
            bbox: ob,
            attributes: vec![other_color.into()],
            mask_rle: None,
            depth_mean: Some((rng.gen_range(0.3..0.7f64) * 100.0).round() / 100.0),
            source: "detections".into(),
        });
        // A near-duplicate detection of the container's child, merged by the tree.
        if rng.gen_bool(0.3) {
            let jitter = BBox::new(ob.x + 1.0, ob.y, ob.w, ob.h);
            boxes.push(BoxRecord {
                label: other.into(),
                bbox: jitter,
                attributes: vec![],
                mask_rle: None,
                depth_mean: None,
                source: "detections".into(),
            });
        }
        let loose_n = rng.gen_range(1..=theme.loose.len());
        let mut loose: Vec<&str> = theme.loose.to_vec();
        loose.shuffle(&mut rng);
        for label in loose.into_iter().take(loose_n) {
            let bw = (wf * rng.gen_range(0.1..0.25)).round();
            let bh = (hf * rng.gen_range(0.1..0.3)).round();
            boxes.push(BoxRecord {
                label: label.into(),
                bbox: BBox::new(
                    rng.gen_range(0.0..(wf - bw)).round(),
                    rng.gen_range(0.0..(hf - bh)).round(),
                    bw,
                    bh,
                ),
                attributes: if rng.gen_bool(0.5) {
                    vec![(*COLORS.choose(&mut rng).unwrap()).into()]
                } else {
                    vec![]
                },
                mask_rle: None,
                depth_mean: rng
                    .gen_bool(0.5)
                    .then(|| (rng.gen_range(0.1..0.9f64) * 100.0).round() / 100.0),
                source: "detections".into(),
            });
        }

        let noun = if count == 1 {
            repeated.to_string()
        } else {
            pluralize(repeated)
        };
        let mut captions = vec![CaptionAnnotation {
            text: format!(
                "A {} {} with {} {} on it in a {} scene.",
                container_color, theme.container, count, noun, theme.name
            ),
            source: "captions".into(),
        }];
        if rng.gen_bool(0.5) {
            captions.push(CaptionAnnotation {
                text: format!("The photo shows a {} seen from a short distance.", theme.name),
                source: "captions".into(),
            });
        }

        let mut qa = vec![
            QaAnnotation {
                question: format!("What color is the {}?", theme.container),
                answer: container_color.into(),
                source: "vqa".into(),
            },
            QaAnnotation {
                question: format!("How many {} are there?", pluralize(repeated)),
                answer: count.to_string(),
                source: "vqa".into(),
            },
        ];
        if rng.gen_bool(0.5) {
            qa.push(QaAnnotation {
                question: format!("Is there a {other}?"),
                answer: "yes".into(),
                source: "vqa".into(),
            });
        }

        let s = stem(i);
        if i % 7 != 3 {
            let mut r = record(
                "captions",
                format!("coco/train/{}.jpg", s.to_uppercase()),
                format!("{}", 100_000 + i),
            );
            r.captions = captions;
            caps.push(r);
        }
        let mut r = record("detections", format!("vg/images/{s}.png"), format!("det-{i}"));
        r.boxes = boxes;
        dets.push(r);
        if i % 5 != 4 {
            let mut r = record("vqa", format!("{s}.jpg"), format!("q{i}"));
            r.qas = qa;
            qas.push(r);
        }
    }
    [caps, dets, qas]
}

/// Writes the three manifests and a registry into `dir`; returns the
/// registry path.
pub fn write_corpus(dir: &Path, n: usize, seed: u64) -> Result<PathBuf, IngestError> {
    std::fs::create_dir_all(dir).map_err(|e| IngestError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let [caps, dets, qas] = synthetic_records(n, seed);
    let mut descriptors = Vec::new();
    for (id, kind, recs) in [
        ("captions", DatasetKind::Captions, caps),
        ("detections", DatasetKind::Boxes, dets),
        ("vqa", DatasetKind::Qa, qas),
    ] {
        let file = format!("{id}.jsonl");
        write_manifest(&recs, &dir.join(&file))?;
        descriptors.push(DatasetDescriptor {
            dataset_id: id.into(),
            manifest_path: PathBuf::from(file),
            kind,
            link_namespace: FILE_STEM.into(),
            id_map_path: None,
        });
    }
    let reg = dir.join("registry.json");
    std::fs::write(
        &reg,
        serde_json::to_string_pretty(&descriptors).expect("registry serializes"),
    )
    .map_err(|e| IngestError::Io {
        path: reg.clone(),
        source: e,
    })?;
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_admissible() {
        let a = synthetic_records(20, 1);
        let b = synthetic_records(20, 1);
        assert_eq!(a, b);
        assert_eq!(a[1].len(), 20);
        for r in &a[1] {
            let (bundle, warnings) = r.clone().into_bundle().unwrap();
            assert!(warnings.is_empty(), "{warnings:?}");
            assert!(bundle.boxes.len() >= 3);
        }
    }
}
