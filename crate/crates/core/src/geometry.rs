//! Axis-aligned boxes in normalized image coordinates, plus the IoU/NMS
//! primitives shared by inference, baselines and metrics.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Category id within a label vocabulary.
pub type Label = usize;

/// Axis-aligned box with coordinates in `[0, 1]` and strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let err = |reason| Error::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(err("non-finite coordinate"));
        }
        if ![x_min, y_min, x_max, y_max].iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(err("coordinate outside [0, 1]"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(err("zero or negative area"));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// The whole image.
    pub fn full() -> Self {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    /// Clips arbitrary coordinates into the unit square; `None` if nothing
    /// with positive area remains.
    pub fn clipped(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox::new(c(x_min), c(y_min), c(x_max), c(y_max)).ok()
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Area of the intersection (zero when disjoint or only touching).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }
}

/// Intersection-over-union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box containing both inputs.
pub fn enclosing_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

/// A scored, labelled box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub label: Label,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, label: Label, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Config(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Detection { bbox, label, score })
    }
}

/// Total order used wherever detections are ranked: score descending, then
/// `(label, x_min, y_min)` ascending.
pub fn detection_rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.label.cmp(&b.label))
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
}

/// Greedy class-wise non-maximum suppression.
///
/// Detections are visited in [`detection_rank`] order; one is kept iff its IoU
/// with every previously kept detection of the same label is below
/// `iou_threshold`. The output is in visiting order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(detections, iou_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

/// [`nms`] returning indices into `detections` instead of copies.
pub fn nms_indices(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detection_rank(&detections[a], &detections[b]));
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            let k = &detections[k];
            k.label == d.label && iou(&k.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(c: [f64; 4]) -> BBox {
        BBox::from_array(c).unwrap()
    }

    fn random_box(rng: &mut impl Rng) -> BBox {
        let x0: f64 = rng.random_range(0.0..0.9);
        let y0: f64 = rng.random_range(0.0..0.9);
        let x1 = rng.random_range(x0 + 0.01..=1.0);
        let y1 = rng.random_range(y0 + 0.01..=1.0);
        b([x0, y0, x1, y1])
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.2, 0.2, 0.2, 0.5).is_err());
        assert!(BBox::new(0.5, 0.2, 0.4, 0.5).is_err());
        assert!(BBox::new(-0.1, 0.2, 0.4, 0.5).is_err());
        assert!(BBox::new(0.0, 0.2, 1.1, 0.5).is_err());
        assert!(BBox::new(f64::NAN, 0.2, 0.4, 0.5).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b([0.0, 0.0, 0.2, 0.2]);
        assert_eq!(iou(&a, &a), 1.0);
        let far = b([0.5, 0.5, 0.6, 0.6]);
        assert_eq!(iou(&a, &far), 0.0);
        let c = b([0.1, 0.1, 0.3, 0.3]);
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
        // touching edges share no area
        let t = b([0.2, 0.0, 0.4, 0.2]);
        assert_eq!(iou(&a, &t), 0.0);
    }

    #[test]
    fn enclosing_examples() {
        let a = b([0.0, 0.0, 0.2, 0.2]);
        assert_eq!(enclosing_box(&a, &a), a);
        let o = b([0.5, 0.5, 0.6, 0.6]);
        assert_eq!(enclosing_box(&a, &o), b([0.0, 0.0, 0.6, 0.6]));
    }

    #[test]
    fn enclosing_is_commutative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (p, q) = (random_box(&mut rng), random_box(&mut rng));
            assert_eq!(enclosing_box(&p, &q), enclosing_box(&q, &p));
        }
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let d = Detection::new(b([0.1, 0.1, 0.4, 0.4]), 0, 0.7).unwrap();
        assert_eq!(nms(&[d], 0.5), vec![d]);

        let hi = Detection::new(b([0.1, 0.1, 0.4, 0.4]), 2, 0.9).unwrap();
        let lo = Detection::new(b([0.1, 0.1, 0.4, 0.4]), 2, 0.8).unwrap();
        assert_eq!(nms(&[lo, hi], 0.5), vec![hi]);

        // different labels never suppress each other
        let other = Detection::new(b([0.1, 0.1, 0.4, 0.4]), 3, 0.8).unwrap();
        assert_eq!(nms(&[other, hi], 0.5), vec![hi, other]);
    }

    #[test]
    fn nms_tie_break_prefers_lower_label_then_coordinates() {
        let a = Detection::new(b([0.2, 0.1, 0.5, 0.5]), 1, 0.5).unwrap();
        let c = Detection::new(b([0.1, 0.1, 0.5, 0.5]), 1, 0.5).unwrap();
        let z = Detection::new(b([0.0, 0.1, 0.5, 0.5]), 0, 0.5).unwrap();
        let out = nms(&[a, c, z], 0.5);
        assert_eq!(out, vec![z, c]);
    }

    /// Selection-based greedy oracle: repeatedly take the best remaining
    /// detection and drop everything it suppresses.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut remaining: Vec<Detection> = dets.to_vec();
        let mut kept = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                if detection_rank(&remaining[i], &remaining[best]) == Ordering::Less {
                    best = i;
                }
            }
            let top = remaining.remove(best);
            remaining.retain(|d| !(d.label == top.label && iou(&d.bbox, &top.bbox) >= thr));
            kept.push(top);
        }
        kept
    }

    #[test]
    fn nms_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let dets: Vec<Detection> = (0..10)
                .map(|_| {
                    Detection::new(random_box(&mut rng), rng.random_range(0..3), rng.random_range(0.0..1.0)).unwrap()
                })
                .collect();
            let thr = rng.random_range(0.05..=1.0);
            assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr));
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
            let x1 = (x + w * (1.0 - x)).max(x + 1e-3).min(1.0);
            let y1 = (y + h * (1.0 - y)).max(y + 1e-3).min(1.0);
            BBox::new(x, y, x1, y1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(p in arb_box(), q in arb_box()) {
            let v = iou(&p, &q);
            prop_assert_eq!(v, iou(&q, &p));
            prop_assert!((0.0..=1.0).contains(&v));
            if p != q {
                prop_assert!(v < 1.0);
            }
        }

        #[test]
        fn enclosing_is_idempotent(p in arb_box(), q in arb_box()) {
            let e = enclosing_box(&p, &q);
            prop_assert_eq!(enclosing_box(&e, &p), e);
            prop_assert!(e.contains(&p) && e.contains(&q));
        }

        #[test]
        fn nms_output_is_suppression_free_subset(
            boxes in proptest::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..12),
            thr in 0.05..1.0f64,
        ) {
            let dets: Vec<Detection> = boxes
                .into_iter()
                .map(|(bb, l, s)| Detection::new(bb, l, s).unwrap())
                .collect();
            let kept = nms(&dets, thr);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for c in &kept[i + 1..] {
                    prop_assert!(a.label != c.label || iou(&a.bbox, &c.bbox) < thr);
                }
            }
        }
    }
}
