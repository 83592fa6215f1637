//! Synthetic relationship scenes: coloured rectangles and ellipses on a plain
//! background, with predicates computed exactly from the placed geometry.
//!
//! Boxes are snapped to the pixel grid, so every coordinate is a multiple of
//! `1 / size` and the rules below can be re-evaluated from the saved
//! annotation boxes without rounding surprises.
//!
//! | rule | holds for `(s, o)` when |
//! |------|-------------------------|
//! | `above` | `s.y_max <= o.y_min`, the x-projections overlap, and the gap is at most `max_gap` |
//! | `below` | `above(o, s)` |
//! | `left_of` | `s.x_max <= o.x_min`, the y-projections overlap, and the gap is at most `max_gap` |
//! | `right_of` | `left_of(o, s)` |
//! | `inside` | `o` contains `s` |
//! | `touching` | the closed boxes meet and neither contains the other |
//! | `same_color` | both shapes were painted with the same colour |

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    save_annotations, write_ppm, Dataset, ImageAnnotation, ObjectRef, Relationship, RgbImage, Subject, Vocabulary,
};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Label};
use crate::seed::stage_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Rect => "rect",
            Shape::Ellipse => "ellipse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Above,
    Below,
    LeftOf,
    RightOf,
    Inside,
    Touching,
    SameColor,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Above => "above",
            Rule::Below => "below",
            Rule::LeftOf => "left_of",
            Rule::RightOf => "right_of",
            Rule::Inside => "inside",
            Rule::Touching => "touching",
            Rule::SameColor => "same_color",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub num_images: usize,
    /// Inclusive range of shapes per image.
    pub objects_per_image: (usize, usize),
    /// Side lengths as a fraction of the image side.
    pub size_range: (f64, f64),
    pub shapes: Vec<Shape>,
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    /// Predicates, in vocabulary order.
    pub rules: Vec<Rule>,
    /// Largest gap (normalized) for the directional rules.
    pub max_gap: f64,
    /// Probability that a new shape is placed next to an existing one.
    pub cluster: f64,
    /// Probability that a clustered shape is nested inside its neighbour.
    pub nest: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: (64, 64),
            num_images: 200,
            objects_per_image: (2, 4),
            size_range: (0.12, 0.4),
            shapes: vec![Shape::Rect, Shape::Ellipse],
            palette: vec![
                [230, 60, 60],
                [60, 200, 80],
                [70, 110, 240],
                [240, 220, 60],
                [220, 80, 220],
            ],
            background: [20, 20, 20],
            rules: vec![Rule::Above, Rule::Below, Rule::Inside],
            max_gap: 0.125,
            cluster: 0.7,
            nest: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic: {m}")));
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return bad(format!("image size {h}x{w} is below 8x8"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo < 1 || lo > hi {
            return bad(format!("objects_per_image ({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        if hi < 2 {
            return bad("at least two objects are needed for a relationship".into());
        }
        let (a, b) = self.size_range;
        if !(a > 0.0 && a <= b && b <= 1.0) {
            return bad(format!("size_range ({a}, {b}) must satisfy 0 < min <= max <= 1"));
        }
        if self.shapes.is_empty() || self.palette.is_empty() || self.rules.is_empty() {
            return bad("shapes, palette and rules must be non-empty".into());
        }
        for (i, r) in self.rules.iter().enumerate() {
            if self.rules[..i].contains(r) {
                return bad(format!("rule {} listed twice", r.name()));
            }
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if self.shapes[..i].contains(s) {
                return bad(format!("shape {} listed twice", s.name()));
            }
        }
        if self.palette.contains(&self.background) {
            return bad("background colour appears in the palette".into());
        }
        if !(self.max_gap >= 0.0 && self.max_gap.is_finite()) {
            return bad(format!("max_gap {} must be non-negative", self.max_gap));
        }
        for (name, p) in [("cluster", self.cluster), ("nest", self.nest)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            object_classes: self.shapes.iter().map(|s| s.name().to_string()).collect(),
            predicates: self.rules.iter().map(|r| r.name().to_string()).collect(),
        }
    }
}

/// A placed shape. `label` indexes `SyntheticConfig::shapes`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub bbox: BBox,
    pub label: Label,
    pub shape: Shape,
    pub color: [u8; 3],
}

pub fn rule_holds(rule: Rule, s: &SceneObject, o: &SceneObject, max_gap: f64) -> bool {
    let (a, b) = (&s.bbox, &o.bbox);
    let x_overlap = a.x_max().min(b.x_max()) - a.x_min().max(b.x_min());
    let y_overlap = a.y_max().min(b.y_max()) - a.y_min().max(b.y_min());
    match rule {
        Rule::Above => a.y_max() <= b.y_min() && x_overlap > 0.0 && b.y_min() - a.y_max() <= max_gap,
        Rule::Below => rule_holds(Rule::Above, o, s, max_gap),
        Rule::LeftOf => a.x_max() <= b.x_min() && y_overlap > 0.0 && b.x_min() - a.x_max() <= max_gap,
        Rule::RightOf => rule_holds(Rule::LeftOf, o, s, max_gap),
        Rule::Inside => b.contains(a),
        Rule::Touching => x_overlap >= 0.0 && y_overlap >= 0.0 && !a.contains(b) && !b.contains(a),
        Rule::SameColor => s.color == o.color,
    }
}

/// Annotation for one scene: subjects are the shapes with at least one
/// outgoing relationship, in placement order.
pub fn annotate(
    image_id: String,
    image: Option<String>,
    objects: &[SceneObject],
    config: &SyntheticConfig,
) -> ImageAnnotation {
    let mut subjects = Vec::new();
    let mut relationships = Vec::new();
    for (si, s) in objects.iter().enumerate() {
        let mut rels = Vec::new();
        for (oi, o) in objects.iter().enumerate() {
            if oi == si {
                continue;
            }
            for (p, &rule) in config.rules.iter().enumerate() {
                if rule_holds(rule, s, o, config.max_gap) {
                    rels.push((p, o));
                }
            }
        }
        if rels.is_empty() {
            continue;
        }
        let subject = subjects.len();
        subjects.push(Subject {
            bbox: s.bbox,
            label: s.label,
        });
        relationships.extend(rels.into_iter().map(|(predicate, o)| Relationship {
            subject,
            predicate,
            object: ObjectRef::Visible {
                bbox: o.bbox,
                label: o.label,
            },
            role: None,
        }));
    }
    ImageAnnotation {
        image_id,
        image,
        subjects,
        relationships,
    }
}

/// Pixel-aligned rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PixRect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl PixRect {
    fn overlaps(&self, o: &PixRect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    fn contains(&self, o: &PixRect) -> bool {
        self.x0 <= o.x0 && o.x1 <= self.x1 && self.y0 <= o.y0 && o.y1 <= self.y1 && self != o
    }
}

struct Placer<'a, R> {
    config: &'a SyntheticConfig,
    rng: &'a mut R,
}

impl<R: Rng> Placer<'_, R> {
    fn side_len(&mut self, full: usize) -> usize {
        let (a, b) = self.config.size_range;
        let lo = ((a * full as f64).round() as usize).max(2);
        let hi = ((b * full as f64).round() as usize).clamp(lo, full);
        self.rng.random_range(lo..=hi)
    }

    /// Start coordinate in `lo..=hi` (signed), or `None` if the range is empty.
    fn pick(&mut self, lo: i64, hi: i64) -> Option<i64> {
        (lo <= hi).then(|| self.rng.random_range(lo..=hi))
    }

    fn candidate(&mut self, placed: &[PixRect]) -> Option<PixRect> {
        let (h, w) = self.config.image_size;
        let (bw, bh) = (self.side_len(w), self.side_len(h));
        let gap_px = (self.config.max_gap * w.min(h) as f64).floor() as i64;
        let (x0, y0, bw, bh) = if !placed.is_empty() && self.rng.random_bool(self.config.cluster) {
            let a = placed[self.rng.random_range(0..placed.len())];
            let (ax0, ay0, ax1, ay1) = (a.x0 as i64, a.y0 as i64, a.x1 as i64, a.y1 as i64);
            if self.rng.random_bool(self.config.nest) {
                // strictly smaller, somewhere inside the neighbour
                let bw = self.rng.random_range(2..=((ax1 - ax0) * 2 / 3).max(2));
                let bh = self.rng.random_range(2..=((ay1 - ay0) * 2 / 3).max(2));
                let x0 = self.pick(ax0, ax1 - bw)?;
                let y0 = self.pick(ay0, ay1 - bh)?;
                (x0, y0, bw, bh)
            } else {
                let (bw, bh) = (bw as i64, bh as i64);
                let gap = self.rng.random_range(0..=gap_px);
                match self.rng.random_range(0..4) {
                    0 => (self.pick(ax0 - bw + 1, ax1 - 1)?, ay0 - gap - bh, bw, bh),
                    1 => (self.pick(ax0 - bw + 1, ax1 - 1)?, ay1 + gap, bw, bh),
                    2 => (ax0 - gap - bw, self.pick(ay0 - bh + 1, ay1 - 1)?, bw, bh),
                    _ => (ax1 + gap, self.pick(ay0 - bh + 1, ay1 - 1)?, bw, bh),
                }
            }
        } else {
            let x0 = self.rng.random_range(0..=(w - bw)) as i64;
            let y0 = self.rng.random_range(0..=(h - bh)) as i64;
            (x0, y0, bw as i64, bh as i64)
        };
        if x0 < 0 || y0 < 0 || x0 + bw > w as i64 || y0 + bh > h as i64 {
            return None;
        }
        let r = PixRect {
            x0: x0 as usize,
            y0: y0 as usize,
            x1: (x0 + bw) as usize,
            y1: (y0 + bh) as usize,
        };
        placed.iter().all(|p| !p.overlaps(&r) || p.contains(&r)).then_some(r)
    }
}

const PLACEMENT_TRIES: usize = 50;
const SCENE_TRIES: usize = 1000;

fn sample_scene<R: Rng>(config: &SyntheticConfig, rng: &mut R) -> Vec<SceneObject> {
    let (h, w) = config.image_size;
    let (lo, hi) = config.objects_per_image;
    let n = rng.random_range(lo..=hi);
    let mut placer = Placer { config, rng };
    let mut rects: Vec<PixRect> = Vec::new();
    let mut objects: Vec<SceneObject> = Vec::new();
    for _ in 0..n {
        let Some(r) = (0..PLACEMENT_TRIES).find_map(|_| placer.candidate(&rects)) else {
            continue;
        };
        // nested shapes must stand out from every shape that contains them
        let enclosing: Vec<[u8; 3]> = rects
            .iter()
            .zip(&objects)
            .filter(|(p, _)| p.contains(&r))
            .map(|(_, o)| o.color)
            .collect();
        let colors: Vec<[u8; 3]> = config
            .palette
            .iter()
            .copied()
            .filter(|c| !enclosing.contains(c))
            .collect();
        if colors.is_empty() {
            continue;
        }
        let color = colors[placer.rng.random_range(0..colors.len())];
        let label = placer.rng.random_range(0..config.shapes.len());
        let bbox = BBox::new(
            r.x0 as f64 / w as f64,
            r.y0 as f64 / h as f64,
            r.x1 as f64 / w as f64,
            r.y1 as f64 / h as f64,
        )
        .expect("placed rectangles lie inside the image");
        rects.push(r);
        objects.push(SceneObject {
            bbox,
            label,
            shape: config.shapes[label],
            color,
        });
    }
    objects
}

/// Paints the scene; larger shapes first so nested ones stay visible.
pub fn render(objects: &[SceneObject], config: &SyntheticConfig) -> RgbImage {
    let (h, w) = config.image_size;
    let mut img = RgbImage::new(h, w, config.background);
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[b]
            .bbox
            .area()
            .total_cmp(&objects[a].bbox.area())
            .then(a.cmp(&b))
    });
    for i in order {
        let o = &objects[i];
        let b = &o.bbox;
        let (cx, cy) = b.center();
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let r0 = (b.y_min() * h as f64).round() as usize;
        let r1 = (b.y_max() * h as f64).round() as usize;
        let c0 = (b.x_min() * w as f64).round() as usize;
        let c1 = (b.x_max() * w as f64).round() as usize;
        for r in r0..r1 {
            for c in c0..c1 {
                let inside = match o.shape {
                    Shape::Rect => true,
                    Shape::Ellipse => {
                        let dx = ((c as f64 + 0.5) / w as f64 - cx) / rx;
                        let dy = ((r as f64 + 0.5) / h as f64 - cy) / ry;
                        dx * dx + dy * dy <= 1.0
                    }
                };
                if inside {
                    img.set(r, c, o.color);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub rasters: Vec<RgbImage>,
    /// The placed shapes behind each annotation, colours included.
    pub scenes: Vec<Vec<SceneObject>>,
}

pub fn image_file_name(index: usize) -> String {
    format!("images/synth{index:05}.ppm")
}

/// Generates `config.num_images` scenes, each with at least one subject.
/// Deterministic in `config.seed`.
pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = stage_rng(config.seed, "synth");
    let mut images = Vec::with_capacity(config.num_images);
    let mut rasters = Vec::with_capacity(config.num_images);
    let mut scenes = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let id = format!("synth{i:05}");
        let mut found = None;
        for _ in 0..SCENE_TRIES {
            let objects = sample_scene(config, &mut rng);
            let ann = annotate(id.clone(), Some(image_file_name(i)), &objects, config);
            if !ann.subjects.is_empty() {
                found = Some((objects, ann));
                break;
            }
        }
        let (objects, ann) = found.ok_or_else(|| {
            Error::Config(format!(
                "synthetic: no scene with a relationship after {SCENE_TRIES} tries"
            ))
        })?;
        rasters.push(render(&objects, config));
        scenes.push(objects);
        images.push(ann);
    }
    Ok(SyntheticDataset {
        dataset: Dataset {
            vocabulary: config.vocabulary(),
            images,
        },
        rasters,
        scenes,
    })
}

/// Writes `annotations.json` and `images/*.ppm` under `dir`.
pub fn write_dataset(dir: &Path, synth: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (i, raster) in synth.rasters.iter().enumerate() {
        write_ppm(&dir.join(image_file_name(i)), raster)?;
    }
    save_annotations(&dir.join("annotations.json"), &synth.dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_annotations, load_image};

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_images: 30,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn every_image_has_a_subject_and_valid_annotation() {
        let all_rules = SyntheticConfig {
            rules: vec![
                Rule::Above,
                Rule::Below,
                Rule::LeftOf,
                Rule::RightOf,
                Rule::Inside,
                Rule::Touching,
                Rule::SameColor,
            ],
            ..small(9)
        };
        for cfg in [small(1), all_rules] {
            let s = generate(&cfg).unwrap();
            for img in &s.dataset.images {
                assert!(!img.subjects.is_empty());
                img.validate(&s.dataset.vocabulary).unwrap();
            }
        }
    }

    #[test]
    fn inside_rule_definition() {
        let o = |b: [f64; 4]| SceneObject {
            bbox: BBox::from_array(b).unwrap(),
            label: 0,
            shape: Shape::Rect,
            color: [1, 2, 3],
        };
        let outer = o([0.1, 0.1, 0.6, 0.6]);
        let inner = o([0.2, 0.2, 0.3, 0.3]);
        assert!(rule_holds(Rule::Inside, &inner, &outer, 0.1));
        assert!(!rule_holds(Rule::Inside, &outer, &inner, 0.1));
        let top = o([0.1, 0.0, 0.3, 0.1]);
        assert!(rule_holds(Rule::Above, &top, &outer, 0.0));
        assert!(rule_holds(Rule::Below, &outer, &top, 0.0));
        assert!(rule_holds(Rule::Touching, &top, &outer, 0.0));
        assert!(!rule_holds(Rule::Touching, &inner, &outer, 0.0));
    }

    #[test]
    fn written_dataset_loads_back() {
        let s = generate(&SyntheticConfig {
            num_images: 3,
            ..small(5)
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &s).unwrap();
        let ds = load_annotations(&dir.path().join("annotations.json")).unwrap();
        assert_eq!(ds, s.dataset);
        for (ann, raster) in ds.images.iter().zip(&s.rasters) {
            assert_eq!(&load_image(dir.path(), ann).unwrap(), raster);
        }
    }

    #[test]
    fn shapes_are_painted_in_their_boxes() {
        let s = generate(&small(2)).unwrap();
        let cfg = small(2);
        for (objects, raster) in s.scenes.iter().zip(&s.rasters) {
            for o in objects {
                let (cx, cy) = o.bbox.center();
                let r = (cy * 64.0) as usize;
                let c = (cx * 64.0) as usize;
                // the centre pixel is painted by this shape or a nested one
                assert_ne!(raster.get(r, c), cfg.background);
            }
        }
    }
}
