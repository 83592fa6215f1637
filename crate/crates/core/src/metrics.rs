//! Relationship-detection metrics: greedy triplet and phrase matching,
//! all-points average precision, per-(action, role) AP, Recall@K, and the
//! weighted score combining relationship mAP, phrase mAP and Recall@50.
//!
//! Detections from different images are pooled before computing AP. Within
//! an image predictions must arrive sorted by score; ties keep input order.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ImageAnnotation, ObjectRef, Role, Vocabulary};
use crate::error::{Error, Result};
use crate::geometry::{enclosing_box, iou, BBox, Label};
use crate::inference::{ImagePredictions, RelationshipDetection};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthRelationship {
    pub subject: BBox,
    pub subject_label: Label,
    pub predicate: Label,
    pub object: ObjectRef,
    pub role: Option<Role>,
}

pub fn ground_truth(ann: &ImageAnnotation) -> Vec<GroundTruthRelationship> {
    ann.relationships
        .iter()
        .map(|r| {
            let s = &ann.subjects[r.subject];
            GroundTruthRelationship {
                subject: s.bbox,
                subject_label: s.label,
                predicate: r.predicate,
                object: r.object,
                role: r.role,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Subject and object boxes are tested separately.
    Triplet,
    /// One test on the box enclosing subject and object.
    Phrase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchSpec {
    pub iou_threshold: f64,
    pub require_subject_label: bool,
    pub require_object_label: bool,
    pub mode: MatchMode,
}

impl MatchSpec {
    pub fn triplet() -> Self {
        MatchSpec {
            iou_threshold: 0.5,
            require_subject_label: true,
            require_object_label: true,
            mode: MatchMode::Triplet,
        }
    }

    pub fn phrase() -> Self {
        MatchSpec {
            mode: MatchMode::Phrase,
            ..Self::triplet()
        }
    }

    /// Human-object protocol: boxes only, no label checks.
    pub fn role() -> Self {
        MatchSpec {
            require_subject_label: false,
            require_object_label: false,
            ..Self::triplet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Match quality of `p` against `g`, or `None` when they cannot match.
/// Hidden ground-truth objects match only predictions flagged invisible, on
/// subject box and predicate; invisible predictions match nothing else.
fn match_quality(p: &RelationshipDetection, g: &GroundTruthRelationship, spec: &MatchSpec) -> Option<f64> {
    if p.predicate != g.predicate {
        return None;
    }
    if spec.require_subject_label && p.subject.label != g.subject_label {
        return None;
    }
    let subject_iou = iou(&p.subject.bbox, &g.subject);
    let q = match (g.object, p.invisible) {
        (ObjectRef::NotVisible, true) => subject_iou,
        (ObjectRef::NotVisible, false) | (ObjectRef::Visible { .. }, true) => return None,
        (ObjectRef::Visible { bbox, label }, false) => {
            if spec.require_object_label && p.object.label != label {
                return None;
            }
            match spec.mode {
                MatchMode::Triplet => subject_iou.min(iou(&p.object.bbox, &bbox)),
                MatchMode::Phrase => iou(
                    &enclosing_box(&p.subject.bbox, &p.object.bbox),
                    &enclosing_box(&g.subject, &bbox),
                ),
            }
        }
    };
    (q >= spec.iou_threshold).then_some(q)
}

pub fn check_sorted(preds: &[RelationshipDetection]) -> Result<()> {
    if let Some(i) = preds.windows(2).position(|w| w[0].score < w[1].score) {
        return Err(Error::Unsorted(format!(
            "prediction {} has score {} after {}",
            i + 1,
            preds[i + 1].score,
            preds[i].score
        )));
    }
    Ok(())
}

/// Greedy matching in score order. Each prediction takes the unmatched
/// ground truth it matches best (ties to the lower index).
pub fn match_detections(
    preds: &[RelationshipDetection],
    gt: &[GroundTruthRelationship],
    spec: &MatchSpec,
) -> Result<Vec<bool>> {
    check_sorted(preds)?;
    let mut used = vec![false; gt.len()];
    Ok(preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if used[j] {
                    continue;
                }
                if let Some(q) = match_quality(p, g, spec) {
                    if best.is_none_or(|(_, bq)| q > bq) {
                        best = Some((j, q));
                    }
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect())
}

/// All-points interpolated average precision: the precision envelope
/// integrated over recall. Zero when there is no ground truth.
pub fn average_precision(flags: &[bool], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return 0.0;
    }
    let n = num_ground_truth as f64;
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    flags
        .iter()
        .zip(&precision)
        .filter(|(&f, _)| f)
        .map(|(_, &p)| p / n)
        .sum()
}

/// Ground truth and predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub ground_truth: Vec<GroundTruthRelationship>,
    pub predictions: Vec<RelationshipDetection>,
}

/// Joins predictions to annotations by image id. Images without predictions
/// get an empty list; predictions for unknown images are an error.
pub fn align(annotations: &[ImageAnnotation], predictions: &[ImagePredictions]) -> Result<Vec<EvalImage>> {
    for p in predictions {
        if !annotations.iter().any(|a| a.image_id == p.image_id) {
            return Err(Error::Config(format!("predictions for unknown image {:?}", p.image_id)));
        }
    }
    annotations
        .iter()
        .map(|a| {
            let preds = predictions
                .iter()
                .filter(|p| p.image_id == a.image_id)
                .flat_map(|p| p.detections.iter().copied())
                .collect::<Vec<_>>();
            check_sorted(&preds).map_err(|e| Error::Unsorted(format!("image {}: {e}", a.image_id)))?;
            Ok(EvalImage {
                ground_truth: ground_truth(a),
                predictions: preds,
            })
        })
        .collect()
}

/// AP over all images for the predictions and ground truth selected by the
/// two filters. `None` when no ground truth is selected.
pub fn pooled_ap(
    images: &[EvalImage],
    spec: &MatchSpec,
    keep_pred: impl Fn(&RelationshipDetection) -> bool,
    keep_gt: impl Fn(&GroundTruthRelationship) -> bool,
) -> Result<Option<f64>> {
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut num_gt = 0;
    for img in images {
        let preds: Vec<RelationshipDetection> = img.predictions.iter().copied().filter(|p| keep_pred(p)).collect();
        let gt: Vec<GroundTruthRelationship> = img.ground_truth.iter().copied().filter(|g| keep_gt(g)).collect();
        num_gt += gt.len();
        let flags = match_detections(&preds, &gt, spec)?;
        pooled.extend(preds.iter().map(|p| p.score).zip(flags));
    }
    if num_gt == 0 {
        return Ok(None);
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let flags: Vec<bool> = pooled.into_iter().map(|(_, f)| f).collect();
    Ok(Some(average_precision(&flags, num_gt)))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// An evaluated action with its role slot; `None` accepts any role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionRole {
    pub action: String,
    pub role: Option<Role>,
}

impl ActionRole {
    pub fn key(&self) -> String {
        match self.role {
            None => self.action.clone(),
            Some(Role::Object) => format!("{}.object", self.action),
            Some(Role::Instrument) => format!("{}.instrument", self.action),
        }
    }
}

/// Actions without a target or too rare to evaluate in the human-object
/// protocol; removed from ground truth and predictions alike.
pub const VCOCO_EXCLUDED: [&str; 5] = ["run", "smile", "stand", "walk", "point"];

const VCOCO_SINGLE_ROLE: [&str; 18] = [
    "carry",
    "catch",
    "drink",
    "hold",
    "jump",
    "kick",
    "lay",
    "look",
    "read",
    "ride",
    "sit",
    "skateboard",
    "ski",
    "snowboard",
    "surf",
    "talk-phone",
    "throw",
    "work-comp",
];
const VCOCO_TWO_ROLES: [&str; 3] = ["cut", "eat", "hit"];

/// The 24 evaluated human-object action-roles.
pub fn vcoco_action_roles() -> Vec<ActionRole> {
    let mut out: Vec<ActionRole> = VCOCO_SINGLE_ROLE
        .iter()
        .map(|a| ActionRole {
            action: a.to_string(),
            role: None,
        })
        .collect();
    for a in VCOCO_TWO_ROLES {
        for role in [Role::Object, Role::Instrument] {
            out.push(ActionRole {
                action: a.to_string(),
                role: Some(role),
            });
        }
    }
    out
}

/// Action-roles for a vocabulary: the standard list when the vocabulary
/// has every standard action, otherwise one entry per non-excluded
/// predicate, split by role when its ground truth carries roles.
pub fn action_roles_for(vocab: &Vocabulary, annotations: &[ImageAnnotation]) -> Vec<ActionRole> {
    let standard = vcoco_action_roles();
    if standard.iter().all(|ar| vocab.predicate_id(&ar.action).is_some()) {
        return standard;
    }
    let mut out = Vec::new();
    for (p, name) in vocab.predicates.iter().enumerate() {
        if VCOCO_EXCLUDED.contains(&name.as_str()) {
            continue;
        }
        let mut roles: Vec<Role> = Vec::new();
        for r in annotations.iter().flat_map(|a| &a.relationships) {
            if r.predicate == p {
                if let Some(role) = r.role {
                    if !roles.contains(&role) {
                        roles.push(role);
                    }
                }
            }
        }
        roles.sort_by_key(|r| *r == Role::Instrument);
        if roles.is_empty() {
            out.push(ActionRole {
                action: name.clone(),
                role: None,
            });
        } else {
            out.extend(roles.into_iter().map(|role| ActionRole {
                action: name.clone(),
                role: Some(role),
            }));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleReport {
    /// `(action-role, AP)`; `None` when the action-role has no ground truth.
    pub per_role: Vec<(ActionRole, Option<f64>)>,
    /// Mean over action-roles with ground truth.
    pub mean: f64,
}

/// Per-(action, role) AP. Predictions are filtered by action only, since
/// they carry no role; ground truth by action and role. Labels are ignored.
pub fn ap_role(images: &[EvalImage], vocab: &Vocabulary, roles: &[ActionRole]) -> Result<RoleReport> {
    let spec = MatchSpec::role();
    let mut per_role = Vec::with_capacity(roles.len());
    for ar in roles {
        let ap = match vocab.predicate_id(&ar.action) {
            None => None,
            Some(p) => pooled_ap(
                images,
                &spec,
                |d| d.predicate == p,
                |g| g.predicate == p && (ar.role.is_none() || g.role == ar.role),
            )?,
        };
        per_role.push((ar.clone(), ap));
    }
    let present: Vec<f64> = per_role.iter().filter_map(|(_, ap)| *ap).collect();
    Ok(RoleReport {
        mean: mean(&present),
        per_role,
    })
}

/// Fraction of ground truth matched by each image's top `k` predictions,
/// with both labels required.
pub fn recall_at_k(images: &[EvalImage], k: usize) -> Result<f64> {
    let spec = MatchSpec::triplet();
    let mut matched = 0usize;
    let mut total = 0usize;
    for img in images {
        let top = &img.predictions[..img.predictions.len().min(k)];
        matched += match_detections(top, &img.ground_truth, &spec)?
            .iter()
            .filter(|&&f| f)
            .count();
        total += img.ground_truth.len();
    }
    Ok(if total == 0 { 0.0 } else { matched as f64 / total as f64 })
}

/// Mean over predicates (with ground truth) of pooled AP under `spec`.
pub fn mean_ap_over_predicates(images: &[EvalImage], num_predicates: usize, spec: &MatchSpec) -> Result<f64> {
    let mut aps = Vec::new();
    for p in 0..num_predicates {
        if let Some(ap) = pooled_ap(images, spec, |d| d.predicate == p, |g| g.predicate == p)? {
            aps.push(ap);
        }
    }
    Ok(mean(&aps))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OidWeights {
    pub relationship_map: f64,
    pub phrase_map: f64,
    pub recall_at_50: f64,
}

impl Default for OidWeights {
    fn default() -> Self {
        OidWeights {
            relationship_map: 0.4,
            phrase_map: 0.4,
            recall_at_50: 0.2,
        }
    }
}

impl OidWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.relationship_map, self.phrase_map, self.recall_at_50];
        if w.iter().any(|&x| x.is_nan() || x < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "metric weights {w:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OidReport {
    pub phrase_map: f64,
    pub relationship_map: f64,
    pub recall_at_50: f64,
    pub score: f64,
}

pub fn oid_score(images: &[EvalImage], num_predicates: usize, weights: &OidWeights) -> Result<OidReport> {
    weights.validate()?;
    let relationship_map = mean_ap_over_predicates(images, num_predicates, &MatchSpec::triplet())?;
    let phrase_map = mean_ap_over_predicates(images, num_predicates, &MatchSpec::phrase())?;
    let recall_at_50 = recall_at_k(images, 50)?;
    Ok(OidReport {
        phrase_map,
        relationship_map,
        recall_at_50,
        score: weights.relationship_map * relationship_map
            + weights.phrase_map * phrase_map
            + weights.recall_at_50 * recall_at_50,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Vcoco,
    Vrd,
    Oid,
}

/// Ordered `key = value` metric list.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub protocol: Protocol,
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One `key=value` line per metric.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            writeln!(s, "{k}={v}").expect("writing to a String");
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|(k, _)| k.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<width$}  value\n{}  ------\n", "metric", "-".repeat(width));
        for (k, v) in &self.entries {
            writeln!(s, "{k:<width$}  {:6.2}", 100.0 * v).expect("writing to a String");
        }
        s
    }
}

/// Drops the excluded actions from ground truth and predictions.
fn without_excluded(images: &[EvalImage], vocab: &Vocabulary) -> Vec<EvalImage> {
    let excluded: Vec<Label> = VCOCO_EXCLUDED.iter().filter_map(|a| vocab.predicate_id(a)).collect();
    images
        .iter()
        .map(|img| EvalImage {
            ground_truth: img
                .ground_truth
                .iter()
                .copied()
                .filter(|g| !excluded.contains(&g.predicate))
                .collect(),
            predictions: img
                .predictions
                .iter()
                .copied()
                .filter(|p| !excluded.contains(&p.predicate))
                .collect(),
        })
        .collect()
}

pub fn evaluate(
    protocol: Protocol,
    images: &[EvalImage],
    vocab: &Vocabulary,
    roles: &[ActionRole],
    weights: &OidWeights,
) -> Result<Report> {
    let entries = match protocol {
        Protocol::Vcoco => {
            let r = ap_role(&without_excluded(images, vocab), vocab, roles)?;
            let mut e: Vec<(String, f64)> = r
                .per_role
                .iter()
                .filter_map(|(ar, ap)| ap.map(|v| (format!("ap_role.{}", ar.key()), v)))
                .collect();
            e.push(("mean_ap_role".into(), r.mean));
            e
        }
        Protocol::Vrd => vec![
            ("recall@50".into(), recall_at_k(images, 50)?),
            ("recall@100".into(), recall_at_k(images, 100)?),
        ],
        Protocol::Oid => {
            let r = oid_score(images, vocab.predicates.len(), weights)?;
            vec![
                ("relationship_map".into(), r.relationship_map),
                ("phrase_map".into(), r.phrase_map),
                ("recall@50".into(), r.recall_at_50),
                ("score".into(), r.score),
            ]
        }
    };
    Ok(Report { protocol, entries })
}
