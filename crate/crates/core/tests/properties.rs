use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use boxattn::attention::{encode, AttentionMap};
use boxattn::baselines::{fit_prior, score_pairs, PriorMode};
use boxattn::data::{ImageAnnotation, ObjectRef, Relationship, Subject, Vocabulary};
use boxattn::geometry::{iou, nms, BBox, Detection};
use boxattn::inference::{
    detect_relationships, detect_subjects, parse_predictions, predictions_to_string, subject_triplets,
    ImagePredictions, InferenceConfig, RelationshipDetection,
};
use boxattn::metrics::{
    ground_truth, mean_ap_over_predicates, oid_score, recall_at_k, EvalImage, MatchSpec, OidWeights,
};
use boxattn::model::{Model, ModelConfig};
use boxattn::numerics::{Graph, Tensor};
use boxattn::training::{dense_targets, generate_samples, sample_loss, train, LossConfig, Schedule, TrainMode};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        input_size: (16, 16),
        channels: vec![4, 6],
        grid: (4, 4),
        num_object_classes: 2,
        num_predicates: 3,
        not_visible: true,
        ..ModelConfig::default()
    }
}

fn random_image(r: &mut impl Rng, (h, w): (usize, usize)) -> Tensor {
    Tensor::new(
        vec![h, w, 3],
        (0..h * w * 3).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_model(seed: u64) -> Model {
    let mut r = rng(seed);
    let mut m = Model::new(small_config(), &mut r).unwrap();
    for p in m.parameters_mut() {
        for v in p.value.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
    m
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.02..0.5f64, 0.02..0.5f64)
        .prop_map(|(x, y, w, h)| BBox::clipped(x, y, x + w, y + h).unwrap())
}

fn detection() -> impl Strategy<Value = Detection> {
    (bbox(), 0..3usize, 0.01..1.0f64).prop_map(|(b, l, s)| Detection::new(b, l, s).unwrap())
}

proptest! {
    #[test]
    fn nms_keeps_a_separated_subset(dets in prop::collection::vec(detection(), 0..25), thr in 0.1..0.9f64) {
        let kept = nms(&dets, thr);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.label != b.label || iou(&a.bbox, &b.bbox) < thr);
                prop_assert!(a.score >= b.score);
            }
        }
    }

    #[test]
    fn baseline_ranking_survives_score_scaling(dets in prop::collection::vec(detection(), 0..8)) {
        let ann = ImageAnnotation {
            image_id: "a".into(),
            image: None,
            subjects: vec![Subject { bbox: BBox::new(0.1, 0.1, 0.4, 0.4).unwrap(), label: 0 }],
            relationships: (0..3)
                .map(|p| Relationship {
                    subject: 0,
                    predicate: p,
                    object: ObjectRef::Visible { bbox: BBox::new(0.3, 0.3, 0.8, 0.8).unwrap(), label: p % 2 },
                    role: None,
                })
                .collect(),
        };
        let prior = fit_prior(&[ann], 3, PriorMode::Freq);
        let half: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * 0.5, ..*d }).collect();
        let a = score_pairs(&dets, &prior, 100);
        let b = score_pairs(&half, &prior, 100);
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!((x.subject.bbox, x.object.bbox, x.predicate), (y.subject.bbox, y.object.bbox, y.predicate));
            prop_assert!(x.score <= 1.0 && x.score > 0.0);
        }
    }
}

#[test]
fn fresh_model_detects_nothing() {
    let model = Model::new(small_config(), &mut rng(0)).unwrap();
    let image = random_image(&mut rng(1), (16, 16));
    assert!(detect_subjects(&model, &image, &InferenceConfig::default())
        .unwrap()
        .is_empty());
}

#[test]
fn relationship_outputs_are_consistent() {
    let cfg = InferenceConfig::default();
    for seed in 0..10 {
        let model = random_model(seed);
        let image = random_image(&mut rng(100 + seed), (16, 16));
        let out = detect_relationships(&model, &image, &cfg).unwrap();
        assert!(!out.is_empty());
        assert!(out.len() <= cfg.top_k);
        for w in out.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for t in &out {
            assert!((0.0..=1.0).contains(&t.score));
            assert!((t.score - t.subject.score * t.object.score * t.predicate_score).abs() <= 1e-12);
            // Stage 2 rerun on the same subject reproduces the triplet bitwise.
            let head = model.forward(&image, &encode(Some(&t.subject.bbox), (16, 16))).unwrap();
            let again = subject_triplets(
                &t.subject,
                &head,
                &InferenceConfig {
                    per_subject: usize::MAX,
                    ..cfg
                },
                Some(2),
            );
            assert!(again.iter().any(|u| u == t));
            if t.invisible {
                assert_eq!(t.object.bbox, t.subject.bbox);
                assert_eq!(t.object.label, 2);
            }
        }
    }
}

#[test]
fn raising_one_subject_score_keeps_its_internal_order() {
    let model = random_model(3);
    let image = random_image(&mut rng(4), (16, 16));
    let subjects = detect_subjects(&model, &image, &InferenceConfig::default()).unwrap();
    let s = subjects[0];
    let head = model.forward(&image, &encode(Some(&s.bbox), (16, 16))).unwrap();
    let cfg = InferenceConfig::default();
    let low = subject_triplets(&s, &head, &cfg, Some(2));
    let boosted = Detection {
        score: (s.score * 1.5).min(1.0),
        ..s
    };
    let high = subject_triplets(&boosted, &head, &cfg, Some(2));
    let key = |t: &RelationshipDetection| (t.object, t.predicate);
    assert_eq!(
        low.iter().map(key).collect::<Vec<_>>(),
        high.iter().map(key).collect::<Vec<_>>()
    );
}

#[test]
fn predictions_round_trip_bit_exact() {
    let vocab = Vocabulary {
        object_classes: vec!["a".into(), "b".into()],
        predicates: vec!["p".into(), "q".into(), "r".into()],
    };
    let model = random_model(7);
    let preds: Vec<ImagePredictions> = (0..3)
        .map(|i| ImagePredictions {
            image_id: format!("img{i}"),
            detections: detect_relationships(
                &model,
                &random_image(&mut rng(i), (16, 16)),
                &InferenceConfig::default(),
            )
            .unwrap(),
        })
        .collect();
    let text = predictions_to_string(&preds, &vocab).unwrap();
    let parsed = parse_predictions(&text, &vocab, Some(2)).unwrap();
    assert_eq!(parsed, preds);
    assert_eq!(predictions_to_string(&parsed, &vocab).unwrap(), text);
}

fn eval_images(r: &mut impl Rng) -> Vec<EvalImage> {
    (0..3)
        .map(|_| {
            // Distinct predicates: no prediction can match two ground truths.
            let gt: Vec<_> = (0..r.random_range(1..4))
                .map(|predicate| {
                    let s = BBox::clipped(r.random_range(0.0..0.5), r.random_range(0.0..0.5), 0.7, 0.7).unwrap();
                    let o = BBox::clipped(0.3, 0.3, r.random_range(0.5..1.0), r.random_range(0.5..1.0)).unwrap();
                    boxattn::metrics::GroundTruthRelationship {
                        subject: s,
                        subject_label: r.random_range(0..2),
                        predicate,
                        object: ObjectRef::Visible {
                            bbox: o,
                            label: r.random_range(0..2),
                        },
                        role: None,
                    }
                })
                .collect();
            let mut preds: Vec<RelationshipDetection> = gt
                .iter()
                .map(|g| {
                    let (ob, ol) = g.object.visible().unwrap();
                    let score = r.random_range(0.0..1.0);
                    RelationshipDetection {
                        subject: Detection::new(g.subject, g.subject_label, 1.0).unwrap(),
                        predicate: if r.random_bool(0.7) {
                            g.predicate
                        } else {
                            (g.predicate + 1) % 3
                        },
                        predicate_score: score,
                        object: Detection::new(ob, ol, 1.0).unwrap(),
                        invisible: false,
                        score,
                    }
                })
                .collect();
            preds.sort_by(|a, b| b.score.total_cmp(&a.score));
            EvalImage {
                ground_truth: gt,
                predictions: preds,
            }
        })
        .collect()
}

fn all_metrics(images: &[EvalImage]) -> [f64; 5] {
    let oid = oid_score(images, 3, &OidWeights::default()).unwrap();
    [
        recall_at_k(images, 50).unwrap(),
        recall_at_k(images, 1).unwrap(),
        mean_ap_over_predicates(images, 3, &MatchSpec::triplet()).unwrap(),
        mean_ap_over_predicates(images, 3, &MatchSpec::phrase()).unwrap(),
        oid.score,
    ]
}

#[test]
fn metric_monotonicity() {
    let mut r = rng(21);
    for _ in 0..200 {
        let images = eval_images(&mut r);
        let base = all_metrics(&images);
        assert!(base.iter().all(|v| (0.0..=1.0).contains(v)));

        // Duplicating a prediction never raises any metric.
        let mut dup = images.clone();
        let i = r.random_range(0..dup.len());
        let j = r.random_range(0..dup[i].predictions.len());
        let p = dup[i].predictions[j];
        dup[i].predictions.insert(j + 1, p);
        for (a, b) in all_metrics(&dup).iter().zip(&base) {
            assert!(a <= b);
        }

        // A correct prediction at any rank never lowers recall.
        let mut more = images.clone();
        let g = more[i].ground_truth[0];
        let (ob, ol) = g.object.visible().unwrap();
        let score = more[i].predictions.get(j).map_or(0.5, |p| p.score);
        let correct = RelationshipDetection {
            subject: Detection::new(g.subject, g.subject_label, 1.0).unwrap(),
            predicate: g.predicate,
            predicate_score: score,
            object: Detection::new(ob, ol, 1.0).unwrap(),
            invisible: false,
            score,
        };
        more[i].predictions.insert(j, correct);
        assert!(recall_at_k(&more, 50).unwrap() >= base[0]);
    }
}

#[test]
fn perfect_predictions_score_one() {
    let mut r = rng(5);
    let mut images = eval_images(&mut r);
    for img in &mut images {
        img.predictions = img
            .ground_truth
            .iter()
            .map(|g| {
                let (ob, ol) = g.object.visible().unwrap();
                RelationshipDetection {
                    subject: Detection::new(g.subject, g.subject_label, 1.0).unwrap(),
                    predicate: g.predicate,
                    predicate_score: 1.0,
                    object: Detection::new(ob, ol, 1.0).unwrap(),
                    invisible: false,
                    score: 1.0,
                }
            })
            .collect();
    }
    let [r50, _, rel, phrase, score] = all_metrics(&images);
    for v in [r50, rel, phrase, score] {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
}

fn two_subject_annotation(with_relationships: bool) -> ImageAnnotation {
    let subjects = vec![
        Subject {
            bbox: BBox::new(0.1, 0.1, 0.4, 0.4).unwrap(),
            label: 0,
        },
        Subject {
            bbox: BBox::new(0.6, 0.5, 0.9, 0.9).unwrap(),
            label: 1,
        },
    ];
    let relationships = if with_relationships {
        vec![
            Relationship {
                subject: 0,
                predicate: 1,
                object: ObjectRef::Visible {
                    bbox: BBox::new(0.5, 0.1, 0.8, 0.3).unwrap(),
                    label: 1,
                },
                role: None,
            },
            Relationship {
                subject: 1,
                predicate: 2,
                object: ObjectRef::NotVisible,
                role: None,
            },
        ]
    } else {
        Vec::new()
    };
    ImageAnnotation {
        image_id: "x".into(),
        image: None,
        subjects,
        relationships,
    }
}

#[test]
fn subject_sample_loss_ignores_relationships() {
    let model = random_model(9);
    let image = random_image(&mut rng(10), (16, 16));
    let loss = LossConfig::default();
    let value = |ann: &ImageAnnotation| {
        let sample = generate_samples(0, ann, Some(2)).next().unwrap();
        let dense = dense_targets(&model, &sample, &loss, &mut rng(11));
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let head = model
            .forward_graph(&mut g, &bound, &image, Some(&AttentionMap::empty((16, 16))))
            .unwrap();
        let l = sample_loss(&mut g, &head, &dense, &loss).unwrap();
        g.value(l).data()[0]
    };
    let a = value(&two_subject_annotation(true));
    let b = value(&two_subject_annotation(false));
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn schedule_decays_twice_by_ten() {
    let s = Schedule::default();
    assert_eq!(s.lr_at_fraction(0.0), 8e-3);
    assert!((s.lr_at_fraction(0.6) - 8e-4).abs() < 1e-18);
    assert!((s.lr_at_fraction(0.8) - 8e-5).abs() < 1e-18);
    assert!((s.lr_at(75, 100) - 8e-5).abs() < 1e-18);
}

#[test]
fn training_is_bitwise_reproducible() {
    let anns = vec![two_subject_annotation(true), two_subject_annotation(true)];
    let images: Vec<Tensor> = (0..2).map(|i| random_image(&mut rng(i), (16, 16))).collect();
    let schedule = Schedule {
        epochs: 3,
        batch_size: 2,
        ..Schedule::default()
    };
    let run = || {
        let mut m = Model::new(small_config(), &mut rng(1)).unwrap();
        assert!(m.conditioning_is_zero());
        let trace = train(
            &mut m,
            &images,
            &anns,
            &schedule,
            &LossConfig::default(),
            TrainMode::Relationships,
            5,
        )
        .unwrap();
        (m, trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 3 * 3);
    for (p, q) in a.parameters().iter().zip(b.parameters()) {
        assert!(p
            .value
            .data()
            .iter()
            .zip(q.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert!(!a.conditioning_is_zero(), "conditioning kernels should learn");
    let gt = ground_truth(&anns[0]);
    assert_eq!(gt.len(), 2);
}
