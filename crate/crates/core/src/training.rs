//! Training-sample generation and the optimization loop.
//!
//! An image with `k` annotated subjects yields `k + 1` samples: one
//! subject-mode sample (empty attention map, every subject box a target, no
//! predicates) and one object-mode sample per subject (that subject's box as
//! attention, its related objects as targets with their predicate sets).

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encode, AttentionMap};
use crate::data::{ImageAnnotation, ObjectRef};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Label};
use crate::model::{BoxCoder, HeadVars, Model};
use crate::numerics::{sgd_momentum_step, Focal, Graph, Tensor, Var};
use crate::seed::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Empty attention map; targets are the subject boxes.
    Subject,
    /// Attention on `subjects[index]`; targets are its related objects.
    Object { subject: usize },
    /// Plain detector sample: every box in the image, conditioning skipped.
    Detector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    pub label: Label,
    /// Predicates in annotation order; empty outside object mode.
    pub predicates: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image_index: usize,
    pub mode: SampleMode,
    /// Conditioning box; `None` means the empty attention map.
    pub attention_box: Option<BBox>,
    pub targets: Vec<Target>,
}

impl TrainingSample {
    pub fn attention(&self, image_size: (usize, usize)) -> AttentionMap {
        encode(self.attention_box.as_ref(), image_size)
    }
}

/// The `k + 1` samples of one image, built lazily.
///
/// Hidden objects become targets on the subject's own box with the reserved
/// class `not_visible`; pass `None` only for data without hidden objects
/// (such relationships are then an error, see [`check_not_visible`]).
pub fn generate_samples(
    image_index: usize,
    ann: &ImageAnnotation,
    not_visible: Option<Label>,
) -> impl Iterator<Item = TrainingSample> + '_ {
    let first = std::iter::once(TrainingSample {
        image_index,
        mode: SampleMode::Subject,
        attention_box: None,
        targets: ann
            .subjects
            .iter()
            .map(|s| Target {
                bbox: s.bbox,
                label: s.label,
                predicates: Vec::new(),
            })
            .collect(),
    });
    first.chain((0..ann.subjects.len()).map(move |si| {
        let subject = ann.subjects[si];
        let mut targets: Vec<Target> = Vec::new();
        for r in ann.relationships.iter().filter(|r| r.subject == si) {
            let (bbox, label) = match r.object {
                ObjectRef::Visible { bbox, label } => (bbox, label),
                ObjectRef::NotVisible => match not_visible {
                    Some(l) => (subject.bbox, l),
                    None => continue,
                },
            };
            match targets.iter_mut().find(|t| t.bbox == bbox && t.label == label) {
                Some(t) => t.predicates.push(r.predicate),
                None => targets.push(Target {
                    bbox,
                    label,
                    predicates: vec![r.predicate],
                }),
            }
        }
        TrainingSample {
            image_index,
            mode: SampleMode::Object { subject: si },
            attention_box: Some(subject.bbox),
            targets,
        }
    }))
}

/// One sample per image with every distinct labelled box as a target.
pub fn detector_sample(image_index: usize, ann: &ImageAnnotation) -> TrainingSample {
    TrainingSample {
        image_index,
        mode: SampleMode::Detector,
        attention_box: None,
        targets: ann
            .all_boxes()
            .into_iter()
            .map(|(bbox, label)| Target {
                bbox,
                label,
                predicates: Vec::new(),
            })
            .collect(),
    }
}

/// Rejects hidden-object annotations when the model has no reserved class.
pub fn check_not_visible(anns: &[ImageAnnotation], not_visible: Option<Label>) -> Result<()> {
    if not_visible.is_some() {
        return Ok(());
    }
    for a in anns {
        if let Some(i) = a.relationships.iter().position(|r| r.object == ObjectRef::NotVisible) {
            return Err(Error::Annotation {
                image_id: a.image_id.clone(),
                field: format!("relationships[{i}].object"),
                reason: "hidden object but the model has no not-visible class".into(),
            });
        }
    }
    Ok(())
}

/// Greedy anchor assignment in target order: each target takes the free
/// anchor with the highest IoU. A target with no overlapping free anchor is
/// dropped.
pub fn assign_anchors(coder: &BoxCoder, targets: &[Target]) -> Vec<(usize, usize)> {
    let mut taken = vec![false; coder.num_anchors()];
    let mut out = Vec::with_capacity(targets.len());
    for (ti, t) in targets.iter().enumerate() {
        if let Some(a) = coder.best_anchor(&t.bbox, &taken) {
            taken[a] = true;
            out.push((ti, a));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Negatives kept per positive anchor (at least this many per sample).
    pub negative_ratio: usize,
    pub box_weight: f64,
    pub box_beta: f64,
    pub focal: Option<Focal>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            negative_ratio: 3,
            box_weight: 1.0,
            box_beta: 0.1,
            focal: None,
        }
    }
}

/// Dense per-anchor targets and loss weights for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTargets {
    pub classes: Tensor,
    pub class_weights: Tensor,
    pub predicates: Tensor,
    pub predicate_weights: Tensor,
    pub boxes: Tensor,
    pub box_weights: Tensor,
    pub num_positive: usize,
}

/// Builds dense targets. Negative anchors are drawn from `rng`; all of them
/// are kept when there are fewer than requested.
pub fn dense_targets(model: &Model, sample: &TrainingSample, loss: &LossConfig, rng: &mut impl Rng) -> DenseTargets {
    let cfg = model.config();
    let coder = BoxCoder::new(cfg.grid);
    let n = coder.num_anchors();
    let (cc, np) = (cfg.class_channels(), cfg.num_predicates);
    let mut classes = vec![0.0; n * cc];
    let mut predicates = vec![0.0; n * np];
    let mut boxes = vec![0.0; n * 4];
    let mut box_w = vec![0.0; n * 4];
    let mut selected = vec![false; n];
    let assigned = assign_anchors(&coder, &sample.targets);
    for &(ti, a) in &assigned {
        let t = &sample.targets[ti];
        selected[a] = true;
        classes[a * cc + t.label] = 1.0;
        for &p in &t.predicates {
            predicates[a * np + p] = 1.0;
        }
        boxes[a * 4..a * 4 + 4].copy_from_slice(&coder.encode(a, &t.bbox));
        box_w[a * 4..a * 4 + 4].fill(1.0);
    }
    let mut negatives: Vec<usize> = (0..n).filter(|&a| !selected[a]).collect();
    let want = loss.negative_ratio * assigned.len().max(1);
    if negatives.len() > want {
        negatives.partial_shuffle(rng, want);
        negatives.truncate(want);
    }
    for a in negatives {
        selected[a] = true;
    }
    let expand = |width: usize| -> Vec<f64> {
        selected
            .iter()
            .flat_map(|&s| std::iter::repeat_n(if s { 1.0 } else { 0.0 }, width))
            .collect()
    };
    let (gh, gw) = cfg.grid;
    let t = |data: Vec<f64>, c: usize| Tensor::new(vec![gh, gw, 1, c], data).expect("grid-sized");
    let pred_w = if sample.mode == SampleMode::Detector {
        vec![0.0; n * np]
    } else {
        expand(np)
    };
    DenseTargets {
        classes: t(classes, cc),
        class_weights: t(expand(cc), cc),
        predicates: t(predicates, np),
        predicate_weights: t(pred_w, np),
        boxes: t(boxes, 4),
        box_weights: t(box_w, 4),
        num_positive: assigned.len(),
    }
}

/// Records the sample loss on `g`: class and predicate sigmoid losses summed
/// over the selected anchors, plus smooth-L1 on positive boxes, all divided
/// by the number of positive anchors (at least one).
pub fn sample_loss(g: &mut Graph, head: &HeadVars, dense: &DenseTargets, loss: &LossConfig) -> Result<Var> {
    let norm = dense.num_positive.max(1) as f64;
    let weight_sum = |t: &Tensor| t.data().iter().sum::<f64>();
    let mut terms = Vec::new();
    for (logits, targets, weights) in [
        (head.class_logits, &dense.classes, &dense.class_weights),
        (head.predicate_logits, &dense.predicates, &dense.predicate_weights),
    ] {
        let ws = weight_sum(weights);
        if ws > 0.0 {
            let l = g.sigmoid_loss(logits, targets, Some(weights), loss.focal)?;
            terms.push(g.scale(l, ws / norm));
        }
    }
    let ws = weight_sum(&dense.box_weights);
    if ws > 0.0 && loss.box_weight > 0.0 {
        let l = g.smooth_l1(head.box_deltas, &dense.boxes, Some(&dense.box_weights), loss.box_beta)?;
        terms.push(g.scale(l, loss.box_weight * ws / norm));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub epochs: usize,
    pub initial_lr: f64,
    /// Fractions of all steps after which the rate is multiplied by `decay_factor`.
    pub decay_points: Vec<f64>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 30,
            initial_lr: 8e-3,
            decay_points: vec![0.5, 0.75],
            decay_factor: 0.1,
            batch_size: 8,
            momentum: 0.9,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("schedule: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        let mut prev = 0.0;
        for &d in &self.decay_points {
            if !(d > prev && d < 1.0) {
                return bad(format!(
                    "decay points {:?} must increase strictly inside (0, 1)",
                    self.decay_points
                ));
            }
            prev = d;
        }
        Ok(())
    }

    /// Learning rate at `fraction` of training: the initial rate times the
    /// decay factor once for every decay point already reached.
    pub fn lr_at_fraction(&self, fraction: f64) -> f64 {
        let passed = self.decay_points.iter().filter(|&&d| fraction >= d).count();
        self.initial_lr * self.decay_factor.powi(passed as i32)
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        self.lr_at_fraction(step as f64 / total_steps.max(1) as f64)
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// The conditioned relationship model, `k + 1` samples per image.
    Relationships,
    /// The plain detector, one sample per image, conditioning off.
    Detector,
}

/// Trains `model` in place and returns the per-step loss trace.
///
/// Each epoch visits every sample once in a seeded shuffled order, so
/// subject-mode and object-mode samples are interleaved uniformly. Batch
/// gradients are averaged before the momentum step.
pub fn train(
    model: &mut Model,
    images: &[Tensor],
    annotations: &[ImageAnnotation],
    schedule: &Schedule,
    loss: &LossConfig,
    mode: TrainMode,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    schedule.validate()?;
    if annotations.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if images.len() != annotations.len() {
        return Err(Error::Config(format!(
            "{} images for {} annotations",
            images.len(),
            annotations.len()
        )));
    }
    let not_visible = model.config().not_visible_label();
    check_not_visible(annotations, not_visible)?;
    let mut samples: Vec<TrainingSample> = match mode {
        TrainMode::Relationships => annotations
            .iter()
            .enumerate()
            .flat_map(|(i, a)| generate_samples(i, a, not_visible))
            .collect(),
        TrainMode::Detector => annotations
            .iter()
            .enumerate()
            .map(|(i, a)| detector_sample(i, a))
            .collect(),
    };
    let size = model.config().input_size;
    let per_epoch = schedule.steps_per_epoch(samples.len());
    let total = per_epoch * schedule.epochs;
    let mut order_rng = stage_rng(seed, "train.order");
    let mut neg_rng = stage_rng(seed, "train.negatives");
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    for _ in 0..schedule.epochs {
        samples.shuffle(&mut order_rng);
        for batch in samples.chunks(schedule.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for s in batch {
                let mut g = Graph::new();
                let bound = model.bind(&mut g, true);
                let attention = match s.mode {
                    SampleMode::Detector => None,
                    _ => Some(s.attention(size)),
                };
                let head = model.forward_graph(&mut g, &bound, &images[s.image_index], attention.as_ref())?;
                let dense = dense_targets(model, s, loss, &mut neg_rng);
                let l = sample_loss(&mut g, &head, &dense, loss)?;
                let value = g.value(l).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { step, loss: value });
                }
                g.backward(l)?;
                model.accumulate_grads(&g, &bound, scale);
                batch_loss += value * scale;
            }
            let lr = schedule.lr_at(step, total);
            sgd_momentum_step(model.parameters_mut(), lr, schedule.momentum);
            trace.push(TraceRow {
                step,
                lr,
                loss: batch_loss,
            });
            step += 1;
        }
    }
    Ok(trace)
}

/// Writes the trace as `step,lr,loss` rows under a header line.
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,lr,loss")?;
    for r in trace {
        writeln!(f, "{},{},{}", r.step, r.lr, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Relationship, Subject};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn ann(k: usize) -> ImageAnnotation {
        let subjects: Vec<Subject> = (0..k)
            .map(|i| Subject {
                bbox: bx(0.18 * i as f64, 0.0, 0.18 * i as f64 + 0.1, 0.2),
                label: 0,
            })
            .collect();
        let relationships = (0..k)
            .map(|i| Relationship {
                subject: i,
                predicate: i % 2,
                object: ObjectRef::Visible {
                    bbox: bx(0.5, 0.5, 0.9, 0.9),
                    label: 1,
                },
                role: None,
            })
            .collect();
        ImageAnnotation {
            image_id: "x".into(),
            image: None,
            subjects,
            relationships,
        }
    }

    #[test]
    fn k_plus_one_samples() {
        for k in [0, 1, 2, 5] {
            let a = ann(k);
            let s: Vec<_> = generate_samples(0, &a, None).collect();
            assert_eq!(s.len(), k + 1);
            assert_eq!(s[0].mode, SampleMode::Subject);
            assert!(s[0].attention_box.is_none());
            assert_eq!(s[0].targets.len(), k);
            for (i, o) in s[1..].iter().enumerate() {
                assert_eq!(o.mode, SampleMode::Object { subject: i });
                assert_eq!(o.attention_box, Some(a.subjects[i].bbox));
            }
        }
    }

    #[test]
    fn predicates_group_per_object() {
        let mut a = ann(1);
        let r = a.relationships[0];
        a.relationships.push(Relationship { predicate: 1, ..r });
        let s: Vec<_> = generate_samples(0, &a, None).collect();
        assert_eq!(s[1].targets.len(), 1);
        assert_eq!(s[1].targets[0].predicates, vec![0, 1]);
    }

    #[test]
    fn hidden_object_sits_on_subject_box() {
        let mut a = ann(1);
        a.relationships[0].object = ObjectRef::NotVisible;
        let s: Vec<_> = generate_samples(0, &a, Some(2)).collect();
        assert_eq!(s[1].targets[0].bbox, a.subjects[0].bbox);
        assert_eq!(s[1].targets[0].label, 2);
        assert!(check_not_visible(std::slice::from_ref(&a), None).is_err());
    }

    #[test]
    fn schedule_decays() {
        let s = Schedule::default();
        assert!((s.lr_at_fraction(0.6) - 8e-4).abs() < 1e-15);
        assert!((s.lr_at_fraction(0.8) - 8e-5).abs() < 1e-16);
        assert_eq!(s.lr_at_fraction(0.1), 8e-3);
        assert!(Schedule {
            decay_points: vec![0.7, 0.5],
            ..Schedule::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn assignment_conflict_takes_next_anchor() {
        let coder = BoxCoder::new((4, 4));
        let t = |b: BBox| Target {
            bbox: b,
            label: 0,
            predicates: vec![],
        };
        let a = assign_anchors(&coder, &[t(bx(0.0, 0.0, 0.25, 0.25)), t(bx(0.0, 0.0, 0.3, 0.25))]);
        assert_eq!(a[0], (0, 0));
        assert_eq!(a[1], (1, 1));
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_size: (16, 16),
            channels: vec![4, 4],
            grid: (4, 4),
            num_object_classes: 2,
            num_predicates: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn dense_targets_counts() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = ann(2);
        let samples: Vec<_> = generate_samples(0, &a, None).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = dense_targets(&model, &samples[0], &LossConfig::default(), &mut rng);
        assert_eq!(d.num_positive, 2);
        assert_eq!(d.classes.data().iter().sum::<f64>(), 2.0);
        assert_eq!(d.predicates.data().iter().sum::<f64>(), 0.0);
        // 2 positives + 6 negatives, each weighting all class channels
        assert_eq!(d.class_weights.data().iter().sum::<f64>(), 8.0 * 2.0);
        let d = dense_targets(&model, &samples[1], &LossConfig::default(), &mut rng);
        assert_eq!(d.num_positive, 1);
        assert_eq!(d.predicates.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn subject_loss_ignores_relationships() {
        let model = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let image = Tensor::filled(&[16, 16, 3], 0.3);
        let a = ann(2);
        let mut b = a.clone();
        b.relationships.clear();
        let loss_of = |ann: &ImageAnnotation| {
            let s = generate_samples(0, ann, None).next().unwrap();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let h = model
                .forward_graph(&mut g, &bound, &image, Some(&s.attention((16, 16))))
                .unwrap();
            let d = dense_targets(&model, &s, &LossConfig::default(), &mut ChaCha8Rng::seed_from_u64(5));
            let l = sample_loss(&mut g, &h, &d, &LossConfig::default()).unwrap();
            g.value(l).data()[0]
        };
        assert_eq!(loss_of(&a), loss_of(&b));
    }

    #[test]
    fn training_is_reproducible_and_keeps_detector_kernels_zero() {
        let images = vec![Tensor::filled(&[16, 16, 3], 0.2), Tensor::filled(&[16, 16, 3], 0.7)];
        let anns = vec![ann(1), ann(2)];
        let sched = Schedule {
            epochs: 2,
            batch_size: 2,
            ..Schedule::default()
        };
        let run = |mode| {
            let mut m = Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let t = train(&mut m, &images, &anns, &sched, &LossConfig::default(), mode, 11).unwrap();
            (m, t)
        };
        let (m1, t1) = run(TrainMode::Relationships);
        let (m2, t2) = run(TrainMode::Relationships);
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 2 * 3);
        assert!(!m1.conditioning_is_zero());
        let (d, _) = run(TrainMode::Detector);
        assert!(d.conditioning_is_zero());
    }
}
