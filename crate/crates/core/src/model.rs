//! Toy conditioned detector.
//!
//! Backbone blocks are `conv3x3 -> condition -> bias -> relu [-> maxpool2]`;
//! a block downsamples while its input is larger than the detection grid.
//! A 3x3 head then predicts, per grid cell (one anchor = the cell), four box
//! deltas, object-class logits and predicate logits.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{condition, AttentionMap, ConditioningSite};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, nms_indices, BBox, Detection, Label};
use crate::numerics::{self, sigmoid, Graph, Padding, Parameter, Tensor, Var};

/// Prior probability used to initialize the classification biases.
const PRIOR_PROBABILITY: f64 = 0.01;
/// Bound on decoded log-scale deltas.
const MAX_LOG_SCALE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(height, width)` of input images in pixels.
    pub input_size: (usize, usize),
    /// Output channels of each backbone block.
    pub channels: Vec<usize>,
    /// `(rows, cols)` of the detection grid.
    pub grid: (usize, usize),
    pub num_object_classes: usize,
    pub num_predicates: usize,
    #[serde(default = "one")]
    pub anchors_per_cell: usize,
    /// Width of an optional hidden 3x3 layer in the head (0 = none).
    #[serde(default)]
    pub head_channels: usize,
    /// Reserve one extra object class for relationships whose object is
    /// not visible.
    #[serde(default)]
    pub not_visible: bool,
}

fn one() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (64, 64),
            channels: vec![8, 16, 32, 32],
            grid: (8, 8),
            num_object_classes: 2,
            num_predicates: 3,
            anchors_per_cell: 1,
            head_channels: 0,
            not_visible: false,
        }
    }
}

impl ModelConfig {
    pub fn backbone_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Width of the class-logit vector, including the reserved slot.
    pub fn class_channels(&self) -> usize {
        self.num_object_classes + usize::from(self.not_visible)
    }

    pub fn not_visible_label(&self) -> Option<Label> {
        self.not_visible.then_some(self.num_object_classes)
    }

    fn head_width(&self) -> usize {
        self.anchors_per_cell * (4 + self.class_channels() + self.num_predicates)
    }

    /// Number of 2x downsamplings between input and grid.
    fn downsamplings(&self) -> Result<usize> {
        let (h, w) = self.input_size;
        let (gh, gw) = self.grid;
        if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
            return Err(Error::Config(format!("grid {gh}x{gw} must divide input {h}x{w}")));
        }
        let (fh, fw) = (h / gh, w / gw);
        if fh != fw || !fh.is_power_of_two() {
            return Err(Error::Config(format!(
                "input/grid ratio {fh}x{fw} must be an equal power of two"
            )));
        }
        Ok(fh.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(
                "need at least one backbone block with non-zero channels".into(),
            ));
        }
        if self.num_object_classes == 0 || self.num_predicates == 0 {
            return Err(Error::Config("class and predicate counts must be >= 1".into()));
        }
        if self.anchors_per_cell != 1 {
            return Err(Error::Config("only one anchor per cell is supported".into()));
        }
        let d = self.downsamplings()?;
        if d > self.channels.len() {
            return Err(Error::Config(format!(
                "{} blocks cannot reach a {:?} grid from {:?} ({d} downsamplings needed)",
                self.channels.len(),
                self.grid,
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: Parameter,
    site: ConditioningSite,
    bias: Parameter,
    downsample: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    hidden: Option<(Parameter, Parameter)>,
    conv: Parameter,
    bias: Parameter,
}

/// Model parameters together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<Block>,
    head: Head,
}

/// Graph handles of a model's parameters, in [`Model::parameters`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles created by the caller, one per parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }
}

/// Head outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub box_deltas: Var,
    pub class_logits: Var,
    pub predicate_logits: Var,
}

/// Head outputs, shaped `[G_h, G_w, A, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub box_deltas: Tensor,
    pub class_logits: Tensor,
    pub predicate_logits: Tensor,
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

impl Model {
    /// Fresh parameters: He-normal convolutions, zero conditioning kernels,
    /// zero biases except the classification biases, which start at the
    /// logit of a small prior probability.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let downs = config.downsamplings()?;
        let mut c_in = 3;
        let blocks = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let b = Block {
                    conv: Parameter::new(format!("block{i}.conv"), he_normal(rng, &[3, 3, c_in, c], 9 * c_in)),
                    site: ConditioningSite::new(format!("block{i}.cond"), c),
                    bias: Parameter::new(format!("block{i}.bias"), Tensor::zeros(&[c])),
                    downsample: i < downs,
                };
                c_in = c;
                b
            })
            .collect();
        let hidden = (config.head_channels > 0).then(|| {
            let hc = config.head_channels;
            let k = Parameter::new("head.hidden.conv", he_normal(rng, &[3, 3, c_in, hc], 9 * c_in));
            let b = Parameter::new("head.hidden.bias", Tensor::zeros(&[hc]));
            c_in = hc;
            (k, b)
        });
        let width = config.head_width();
        let normal = Normal::new(0.0, 0.01).expect("positive std");
        let n = 9 * c_in * width;
        let conv = Parameter::new(
            "head.conv",
            Tensor::new(vec![3, 3, c_in, width], (0..n).map(|_| normal.sample(rng)).collect())?,
        );
        let prior_logit = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        let mut bias = vec![0.0; width];
        for v in &mut bias[4..] {
            *v = prior_logit;
        }
        let bias = Parameter::new("head.bias", Tensor::new(vec![width], bias)?);
        Ok(Model {
            config,
            blocks,
            head: Head { hidden, conv, bias },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv, &b.site.kernel, &b.bias]);
        }
        if let Some((k, b)) = &self.head.hidden {
            out.extend([k, b]);
        }
        out.extend([&self.head.conv, &self.head.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv);
            out.push(&mut b.site.kernel);
            out.push(&mut b.bias);
        }
        if let Some((k, b)) = &mut self.head.hidden {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.head.conv);
        out.push(&mut self.head.bias);
        out
    }

    pub fn conditioning_sites(&self) -> impl Iterator<Item = &ConditioningSite> {
        self.blocks.iter().map(|b| &b.site)
    }

    /// True when every conditioning kernel is exactly zero.
    pub fn conditioning_is_zero(&self) -> bool {
        self.conditioning_sites()
            .all(|s| s.kernel.value.data().iter().all(|&v| v == 0.0))
    }

    /// Inserts parameters into `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds `scale * dL/dp` for every bound parameter into its accumulator.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound, scale: f64) {
        for (p, v) in self.parameters_mut().into_iter().zip(&bound.vars) {
            if let Some(grad) = g.grad(*v) {
                p.accumulate_grad(grad, scale);
            }
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        if image.shape() != [h, w, 3] {
            return Err(Error::shape(
                "forward",
                format!("image {:?}, model expects [{h}, {w}, 3]", image.shape()),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `attention = None` runs the plain
    /// base detector with every conditioning site skipped.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        image: &Tensor,
        attention: Option<&AttentionMap>,
    ) -> Result<HeadVars> {
        self.check_image(image)?;
        if let Some(m) = attention {
            if m.size() != self.config.input_size {
                return Err(Error::shape(
                    "forward",
                    format!("attention map {:?} vs image {:?}", m.size(), self.config.input_size),
                ));
            }
        }
        let centered = image.data().iter().map(|v| v - 0.5).collect();
        let mut x = g.constant(Tensor::new(image.shape().to_vec(), centered)?);
        let mut vars = bound.vars.iter().copied();
        let mut next = || vars.next().expect("bound parameters match model");
        for block in &self.blocks {
            let (k, ck, b) = (next(), next(), next());
            let mut u = g.conv2d(x, k, 1, Padding::Same)?;
            if let Some(m) = attention {
                u = condition(g, u, m, ck)?;
            }
            u = g.add_bias(u, b)?;
            u = g.relu(u);
            if block.downsample {
                u = g.max_pool2(u)?;
            }
            x = u;
        }
        if self.head.hidden.is_some() {
            let (k, b) = (next(), next());
            let h = g.conv2d(x, k, 1, Padding::Same)?;
            let h = g.add_bias(h, b)?;
            x = g.relu(h);
        }
        let (k, b) = (next(), next());
        let out = g.conv2d(x, k, 1, Padding::Same)?;
        let out = g.add_bias(out, b)?;

        let (gh, gw) = self.config.grid;
        let a = self.config.anchors_per_cell;
        let cc = self.config.class_channels();
        let np = self.config.num_predicates;
        let boxes = g.slice_channels(out, 0, 4)?;
        let classes = g.slice_channels(out, 4, cc)?;
        let preds = g.slice_channels(out, 4 + cc, np)?;
        Ok(HeadVars {
            box_deltas: g.reshape(boxes, vec![gh, gw, a, 4])?,
            class_logits: g.reshape(classes, vec![gh, gw, a, cc])?,
            predicate_logits: g.reshape(preds, vec![gh, gw, a, np])?,
        })
    }

    /// Conditioned forward pass with constant parameters.
    pub fn forward(&self, image: &Tensor, attention: &AttentionMap) -> Result<HeadOutput> {
        self.run(image, Some(attention))
    }

    /// The base detector: identical network with conditioning removed.
    pub fn forward_unconditioned(&self, image: &Tensor) -> Result<HeadOutput> {
        self.run(image, None)
    }

    fn run(&self, image: &Tensor, attention: Option<&AttentionMap>) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let h = self.forward_graph(&mut g, &bound, image, attention)?;
        Ok(HeadOutput {
            box_deltas: g.value(h.box_deltas).clone(),
            class_logits: g.value(h.class_logits).clone(),
            predicate_logits: g.value(h.predicate_logits).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.parameters();
        let records: Vec<(&str, &Tensor)> = params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        numerics::save_checkpoint(path, &records)
    }

    /// Loads values from a checkpoint into a model built from `config`.
    /// Names and shapes must match exactly.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let records = numerics::load_checkpoint(path)?;
        Self::from_records(config, records)
    }

    pub fn from_records(config: ModelConfig, records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Model::new(
            config,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        let mut params = model.parameters_mut();
        if params.len() != records.len() {
            return Err(Error::parse(
                "checkpoint",
                format!("{} records, model has {} parameters", records.len(), params.len()),
            ));
        }
        for (p, (name, t)) in params.iter_mut().zip(records) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(Error::parse(
                    "checkpoint",
                    format!(
                        "record {name} {:?} does not match {} {:?}",
                        t.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            **p = Parameter::new(name, t);
        }
        Ok(model)
    }

    /// Copies every parameter except the conditioning kernels from `base`,
    /// leaving the kernels at zero.
    pub fn warm_start_from(&mut self, base: &Model) -> Result<()> {
        if base.config != self.config {
            return Err(Error::Config("warm start requires identical model configs".into()));
        }
        for (dst, src) in self.parameters_mut().into_iter().zip(base.parameters()) {
            if dst.name.ends_with(".cond") {
                *dst = Parameter::new(dst.name.clone(), Tensor::zeros(dst.value.shape()));
            } else {
                *dst = Parameter::new(src.name.clone(), src.value.clone());
            }
        }
        Ok(())
    }
}

/// Anchor boxes and the `(dx, dy, log dw, log dh)` parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    pub grid: (usize, usize),
}

impl BoxCoder {
    pub fn new(grid: (usize, usize)) -> Self {
        BoxCoder { grid }
    }

    pub fn num_anchors(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Anchor `index` is grid cell `(index / cols, index % cols)`.
    pub fn anchor(&self, index: usize) -> BBox {
        let (gh, gw) = self.grid;
        let (r, c) = (index / gw, index % gw);
        BBox::new(
            c as f64 / gw as f64,
            r as f64 / gh as f64,
            (c + 1) as f64 / gw as f64,
            (r + 1) as f64 / gh as f64,
        )
        .expect("grid cells are valid boxes")
    }

    pub fn encode(&self, index: usize, b: &BBox) -> [f64; 4] {
        let a = self.anchor(index);
        let (acx, acy) = a.center();
        let (cx, cy) = b.center();
        [
            (cx - acx) / a.width(),
            (cy - acy) / a.height(),
            (b.width() / a.width()).ln(),
            (b.height() / a.height()).ln(),
        ]
    }

    /// Decodes deltas on anchor `index`; the box is clipped to the image and
    /// `None` is returned if nothing with positive area is left.
    pub fn decode(&self, index: usize, d: &[f64]) -> Option<BBox> {
        let a = self.anchor(index);
        let (acx, acy) = a.center();
        let cx = acx + d[0] * a.width();
        let cy = acy + d[1] * a.height();
        let w = a.width() * d[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = a.height() * d[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        BBox::clipped(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    /// Anchor with the highest IoU with `b`; ties go to the anchor that
    /// ranks first under the NMS tie-break (lower `x_min`, then `y_min`).
    pub fn best_anchor(&self, b: &BBox, taken: &[bool]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.num_anchors() {
            if taken.get(i).copied().unwrap_or(false) {
                continue;
            }
            let a = self.anchor(i);
            let v = iou(&a, b);
            if v <= 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((j, bv)) => {
                    let aj = self.anchor(j);
                    v > bv
                        || (v == bv
                            && (a.x_min(), a.y_min()).partial_cmp(&(aj.x_min(), aj.y_min()))
                                == Some(std::cmp::Ordering::Less))
                }
            };
            if better {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// An object-mode detection with its per-predicate sigmoid scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDetection {
    pub detection: Detection,
    pub predicate_scores: Vec<f64>,
    pub anchor: usize,
}

fn head_grid(head: &HeadOutput) -> (usize, usize) {
    let s = head.class_logits.shape();
    (s[0], s[1])
}

/// Subject-mode decode: one detection per (anchor, class) whose sigmoid
/// score exceeds `score_threshold`, followed by class-wise NMS. Predicate
/// logits and the reserved not-visible class are ignored.
pub fn decode_subjects(
    head: &HeadOutput,
    score_threshold: f64,
    nms_iou: f64,
    not_visible: Option<Label>,
) -> Vec<Detection> {
    let coder = BoxCoder::new(head_grid(head));
    let cc = head.class_logits.channels();
    let mut dets = Vec::new();
    for a in 0..coder.num_anchors() {
        let logits = &head.class_logits.data()[a * cc..(a + 1) * cc];
        let mut decoded: Option<Option<BBox>> = None;
        for (label, &l) in logits.iter().enumerate() {
            if Some(label) == not_visible {
                continue;
            }
            let s = sigmoid(l);
            if s <= score_threshold {
                continue;
            }
            let bbox = *decoded.get_or_insert_with(|| coder.decode(a, &head.box_deltas.data()[a * 4..a * 4 + 4]));
            if let Some(bbox) = bbox {
                dets.push(Detection { bbox, label, score: s });
            }
        }
    }
    nms(&dets, nms_iou)
}

/// Object-mode decode: detections over object classes (including the
/// reserved class) with predicate scores attached; class-wise NMS on the
/// object score.
pub fn decode_objects(head: &HeadOutput, score_threshold: f64, nms_iou: f64) -> Vec<ObjectDetection> {
    let coder = BoxCoder::new(head_grid(head));
    let cc = head.class_logits.channels();
    let np = head.predicate_logits.channels();
    let mut cands = Vec::new();
    for a in 0..coder.num_anchors() {
        let logits = &head.class_logits.data()[a * cc..(a + 1) * cc];
        let Some(bbox) = coder.decode(a, &head.box_deltas.data()[a * 4..a * 4 + 4]) else {
            continue;
        };
        for (label, &l) in logits.iter().enumerate() {
            let s = sigmoid(l);
            if s > score_threshold {
                cands.push((Detection { bbox, label, score: s }, a));
            }
        }
    }
    let dets: Vec<Detection> = cands.iter().map(|(d, _)| *d).collect();
    nms_indices(&dets, nms_iou)
        .into_iter()
        .map(|i| {
            let (detection, a) = cands[i];
            ObjectDetection {
                detection,
                predicate_scores: head.predicate_logits.data()[a * np..(a + 1) * np]
                    .iter()
                    .map(|&l| sigmoid(l))
                    .collect(),
                anchor: a,
            }
        })
        .collect()
}
