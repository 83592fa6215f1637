//! Two-stage relationship prediction with chain-rule scoring.
//!
//! Stage 1 runs the model with the empty attention map and keeps subject
//! detections above `subject_threshold`. Stage 2 reruns the model once per
//! subject with that subject's box as attention and reads objects with their
//! predicate scores. A triplet scores `s = s_s * s_o * s_p`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{encode, AttentionMap};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, Label};
use crate::model::{decode_objects, decode_subjects, HeadOutput, Model};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub subject_threshold: f64,
    /// Minimum object score in stage 2.
    pub pair_threshold: f64,
    pub nms_iou: f64,
    /// Triplets kept per subject before the global merge.
    pub per_subject: usize,
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            subject_threshold: 0.05,
            pair_threshold: 0.05,
            nms_iou: 0.5,
            per_subject: 20,
            top_k: 100,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("subject_threshold", self.subject_threshold),
            ("pair_threshold", self.pair_threshold),
        ] {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("{name} {t} outside [0, 1)")));
            }
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Config(format!("nms_iou {} outside (0, 1]", self.nms_iou)));
        }
        Ok(())
    }
}

/// A scored `<subject, predicate, object>` triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationshipDetection {
    pub subject: Detection,
    pub predicate: Label,
    pub predicate_score: f64,
    /// For hidden objects: the subject box and the reserved label.
    pub object: Detection,
    pub invisible: bool,
    pub score: f64,
}

impl RelationshipDetection {
    /// `s_o * s_p`.
    pub fn pair_score(&self) -> f64 {
        self.object.score * self.predicate_score
    }
}

/// Stable sort by score, highest first.
pub fn sort_by_score(dets: &mut [RelationshipDetection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

pub fn detect_subjects(model: &Model, image: &Tensor, cfg: &InferenceConfig) -> Result<Vec<Detection>> {
    let head = model.forward(image, &AttentionMap::empty(model.config().input_size))?;
    Ok(decode_subjects(
        &head,
        cfg.subject_threshold,
        cfg.nms_iou,
        model.config().not_visible_label(),
    ))
}

/// Triplets for one subject from its conditioned head output, sorted by
/// `s_o * s_p` and capped at `per_subject`.
pub fn subject_triplets(
    subject: &Detection,
    head: &HeadOutput,
    cfg: &InferenceConfig,
    not_visible: Option<Label>,
) -> Vec<RelationshipDetection> {
    let mut out = Vec::new();
    for od in decode_objects(head, cfg.pair_threshold, cfg.nms_iou) {
        let invisible = Some(od.detection.label) == not_visible;
        let object = if invisible {
            Detection {
                bbox: subject.bbox,
                ..od.detection
            }
        } else {
            od.detection
        };
        for (predicate, &sp) in od.predicate_scores.iter().enumerate() {
            let pair = object.score * sp;
            out.push(RelationshipDetection {
                subject: *subject,
                predicate,
                predicate_score: sp,
                object,
                invisible,
                score: subject.score * pair,
            });
        }
    }
    out.sort_by(|a, b| b.pair_score().total_cmp(&a.pair_score()));
    out.truncate(cfg.per_subject);
    out
}

pub fn detect_relationships(
    model: &Model,
    image: &Tensor,
    cfg: &InferenceConfig,
) -> Result<Vec<RelationshipDetection>> {
    let size = model.config().input_size;
    let not_visible = model.config().not_visible_label();
    let mut all = Vec::new();
    for s in detect_subjects(model, image, cfg)? {
        let head = model.forward(image, &encode(Some(&s.bbox), size))?;
        all.extend(subject_triplets(&s, &head, cfg, not_visible));
    }
    sort_by_score(&mut all);
    all.truncate(cfg.top_k);
    Ok(all)
}

/// Predictions for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePredictions {
    pub image_id: String,
    pub detections: Vec<RelationshipDetection>,
}

/// Tab-separated predictions header. Boxes are normalized
/// `x_min y_min x_max y_max`; labels are vocabulary names, with
/// `not_visible` for hidden objects; `invisible` is 0 or 1.
pub const PREDICTIONS_HEADER: &str = "image_id\tsubject_x_min\tsubject_y_min\tsubject_x_max\tsubject_y_max\tsubject_label\tsubject_score\tpredicate\tpredicate_score\tobject_x_min\tobject_y_min\tobject_x_max\tobject_y_max\tobject_label\tobject_score\tinvisible\tscore";

const NOT_VISIBLE_NAME: &str = "not_visible";

pub fn predictions_to_string(preds: &[ImagePredictions], vocab: &Vocabulary) -> Result<String> {
    let mut s = String::new();
    s.push_str(PREDICTIONS_HEADER);
    s.push('\n');
    let class_name = |l: Label, invisible: bool| -> Result<&str> {
        if invisible {
            return Ok(NOT_VISIBLE_NAME);
        }
        vocab
            .object_classes
            .get(l)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("object label {l} not in vocabulary")))
    };
    for img in preds {
        if img.image_id.contains(['\t', '\n']) {
            return Err(Error::Config(format!(
                "image id {:?} contains a tab or newline",
                img.image_id
            )));
        }
        for d in &img.detections {
            let sb = d.subject.bbox.to_array();
            let ob = d.object.bbox.to_array();
            let pred = vocab
                .predicates
                .get(d.predicate)
                .ok_or_else(|| Error::Config(format!("predicate {} not in vocabulary", d.predicate)))?;
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                img.image_id,
                sb[0],
                sb[1],
                sb[2],
                sb[3],
                class_name(d.subject.label, false)?,
                d.subject.score,
                pred,
                d.predicate_score,
                ob[0],
                ob[1],
                ob[2],
                ob[3],
                class_name(d.object.label, d.invisible)?,
                d.object.score,
                d.invisible as u8,
                d.score
            )
            .expect("writing to a String");
        }
    }
    Ok(s)
}

/// Parses a predictions file. `not_visible` is the label id assigned to
/// hidden objects. Rows are grouped by image in order of first appearance.
pub fn parse_predictions(text: &str, vocab: &Vocabulary, not_visible: Option<Label>) -> Result<Vec<ImagePredictions>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == PREDICTIONS_HEADER => {}
        _ => return Err(Error::parse("line 1", "missing predictions header")),
    }
    let mut out: Vec<ImagePredictions> = Vec::new();
    for (i, line) in lines {
        let loc = |field: &str| format!("line {} field {field}", i + 1);
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 17 {
            return Err(Error::parse(
                format!("line {}", i + 1),
                format!("expected 17 fields, got {}", f.len()),
            ));
        }
        let num = |k: usize, name: &str| -> Result<f64> {
            f[k].parse::<f64>()
                .map_err(|_| Error::parse(loc(name), format!("not a number: {:?}", f[k])))
        };
        let bbox = |k: usize, name: &str| -> Result<BBox> {
            BBox::new(num(k, name)?, num(k + 1, name)?, num(k + 2, name)?, num(k + 3, name)?)
                .map_err(|e| Error::parse(loc(name), e.to_string()))
        };
        let class = |k: usize, name: &str| -> Result<Label> {
            if f[k] == NOT_VISIBLE_NAME {
                return not_visible.ok_or_else(|| Error::parse(loc(name), "hidden object but no reserved class"));
            }
            vocab
                .object_id(f[k])
                .ok_or_else(|| Error::parse(loc(name), format!("unknown object class {:?}", f[k])))
        };
        let det = |b: BBox, label: Label, score: f64, name: &str| -> Result<Detection> {
            Detection::new(b, label, score).map_err(|e| Error::parse(loc(name), e.to_string()))
        };
        let subject = det(
            bbox(1, "subject_box")?,
            class(5, "subject_label")?,
            num(6, "subject_score")?,
            "subject_score",
        )?;
        let predicate = vocab
            .predicate_id(f[7])
            .ok_or_else(|| Error::parse(loc("predicate"), format!("unknown predicate {:?}", f[7])))?;
        let object = det(
            bbox(9, "object_box")?,
            class(13, "object_label")?,
            num(14, "object_score")?,
            "object_score",
        )?;
        let invisible = match f[15] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(
                    loc("invisible"),
                    format!("expected 0 or 1, got {other:?}"),
                ))
            }
        };
        let d = RelationshipDetection {
            subject,
            predicate,
            predicate_score: num(8, "predicate_score")?,
            object,
            invisible,
            score: num(16, "score")?,
        };
        match out.iter_mut().find(|p| p.image_id == f[0]) {
            Some(p) => p.detections.push(d),
            None => out.push(ImagePredictions {
                image_id: f[0].to_string(),
                detections: vec![d],
            }),
        }
    }
    Ok(out)
}

pub fn save_predictions(path: &Path, preds: &[ImagePredictions], vocab: &Vocabulary) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(predictions_to_string(preds, vocab)?.as_bytes())?;
    Ok(())
}

pub fn load_predictions(path: &Path, vocab: &Vocabulary, not_visible: Option<Label>) -> Result<Vec<ImagePredictions>> {
    parse_predictions(&std::fs::read_to_string(path)?, vocab, not_visible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(b: [f64; 4], label: Label, score: f64) -> Detection {
        Detection::new(BBox::from_array(b).unwrap(), label, score).unwrap()
    }

    #[test]
    fn product_formula() {
        let s = det([0.1, 0.1, 0.4, 0.4], 0, 0.8);
        let o = det([0.5, 0.5, 0.9, 0.9], 1, 0.5);
        let r = RelationshipDetection {
            subject: s,
            predicate: 0,
            predicate_score: 0.5,
            object: o,
            invisible: false,
            score: s.score * o.score * 0.5,
        };
        assert_eq!(r.pair_score(), 0.25);
        assert_eq!(r.score, 0.2);
    }

    #[test]
    fn fresh_model_finds_nothing() {
        let cfg = ModelConfig {
            input_size: (16, 16),
            channels: vec![4, 4],
            grid: (4, 4),
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let image = Tensor::filled(&[16, 16, 3], 0.5);
        // class biases start at logit(0.01), below the 0.05 threshold
        assert!(detect_subjects(&model, &image, &InferenceConfig::default())
            .unwrap()
            .is_empty());
        assert!(detect_relationships(&model, &image, &InferenceConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn predictions_round_trip_bit_exactly() {
        let vocab = Vocabulary {
            object_classes: vec!["a".into(), "b".into()],
            predicates: vec!["p".into(), "q".into()],
        };
        let s = det([0.1, 0.2, 0.3, 0.4], 0, 0.1 + 0.2);
        let o = det([0.5, 0.5, 0.9, 1.0], 1, 1.0 / 3.0);
        let r = RelationshipDetection {
            subject: s,
            predicate: 1,
            predicate_score: 0.7,
            object: o,
            invisible: false,
            score: s.score * o.score * 0.7,
        };
        let hidden = RelationshipDetection {
            object: Detection {
                bbox: s.bbox,
                label: 2,
                score: 0.9,
            },
            invisible: true,
            ..r
        };
        let preds = vec![
            ImagePredictions {
                image_id: "i0".into(),
                detections: vec![r, hidden],
            },
            ImagePredictions {
                image_id: "i1".into(),
                detections: vec![r],
            },
        ];
        let text = predictions_to_string(&preds, &vocab).unwrap();
        let back = parse_predictions(&text, &vocab, Some(2)).unwrap();
        assert_eq!(back, preds);
        assert_eq!(predictions_to_string(&back, &vocab).unwrap(), text);
        assert!(parse_predictions(&text, &vocab, None).is_err());
        assert!(parse_predictions("nope\n", &vocab, None).is_err());
    }
}
