//! Finite-difference checks of every differentiable operation and of the
//! full detector loss.
//!
//! Each check reduces the operation's output to a scalar with a random
//! projection, so every output element contributes with its own weight.
//! Operations that are linear in each input element are probed with a unit
//! step, where central differences are exact up to rounding; the rest use a
//! small step on inputs kept away from kinks and ties.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{condition, encode};
use crate::error::Result;
use crate::geometry::BBox;
use crate::model::{Bound, Model, ModelConfig};
use crate::numerics::{grad_check, Focal, Graph, Padding, Tensor, Var};
use crate::seed::stage_rng;
use crate::training::{dense_targets, sample_loss, LossConfig, SampleMode, Target, TrainingSample};

pub const LINEAR_TOLERANCE: f64 = 1e-9;
pub const TOLERANCE: f64 = 1e-4;
const LINEAR_STEP: f64 = 1.0;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub linear: bool,
    /// Worst relative error over all seeds.
    pub worst: f64,
}

impl OpCheck {
    pub fn tolerance(&self) -> f64 {
        if self.linear {
            LINEAR_TOLERANCE
        } else {
            TOLERANCE
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.tolerance()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive shape")
}

/// Values with magnitude in `[0.1, 1]` and random sign: far from the relu kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect(),
    )
    .expect("positive shape")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4))
}

type Check = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One randomized instance of operation `name`: the scalar function and its inputs.
fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Check, Vec<Tensor>) {
    let (h, w, c) = dims(rng);
    let proj = |rng: &mut ChaCha8Rng, shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    match name {
        "add" => {
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                g.dot(y, wt.clone())
            });
            (
                f,
                vec![uniform(rng, &[h, w, c], -1.0, 1.0), uniform(rng, &[h, w, c], -1.0, 1.0)],
            )
        }
        "add_bias" => {
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                g.dot(y, wt.clone())
            });
            (
                f,
                vec![uniform(rng, &[h, w, c], -1.0, 1.0), uniform(rng, &[c], -1.0, 1.0)],
            )
        }
        "mul" => {
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                g.dot(y, wt.clone())
            });
            (
                f,
                vec![uniform(rng, &[h, w, c], -1.0, 1.0), uniform(rng, &[h, w, c], -1.0, 1.0)],
            )
        }
        "scale" => {
            let wt = proj(rng, &[h, w, c]);
            let k = rng.random_range(-2.0..2.0);
            let f: Check = Box::new(move |g, v| {
                let y = g.scale(v[0], k);
                g.dot(y, wt.clone())
            });
            (f, vec![uniform(rng, &[h, w, c], -1.0, 1.0)])
        }
        "conv2d" => {
            let stride = rng.random_range(1..3);
            let padding = if rng.random_bool(0.5) {
                Padding::Same
            } else {
                Padding::Valid
            };
            let (h, w) = (h + 2, w + 2);
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let c_out = rng.random_range(1..4);
            let x = uniform(rng, &[h, w, c], -1.0, 1.0);
            let kernel = uniform(rng, &[k, k, c, c_out], -1.0, 1.0);
            let mut g = Graph::new();
            let (xv, kv) = (g.constant(x.clone()), g.constant(kernel.clone()));
            let out_shape = g
                .conv2d(xv, kv, stride, padding)
                .map(|o| g.value(o).shape().to_vec())
                .expect("valid convolution");
            let wt = proj(rng, &out_shape);
            let f: Check = Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], stride, padding)?;
                g.dot(y, wt.clone())
            });
            (f, vec![x, kernel])
        }
        "slice_channels" => {
            let c = c + 2;
            let start = rng.random_range(0..c - 1);
            let len = rng.random_range(1..=c - start);
            let wt = proj(rng, &[h, w, len]);
            let f: Check = Box::new(move |g, v| {
                let y = g.slice_channels(v[0], start, len)?;
                g.dot(y, wt.clone())
            });
            (f, vec![uniform(rng, &[h, w, c], -1.0, 1.0)])
        }
        "reshape" => {
            let wt = proj(rng, &[h * w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.reshape(v[0], vec![h * w, c])?;
                g.dot(y, wt.clone())
            });
            (f, vec![uniform(rng, &[h, w, c], -1.0, 1.0)])
        }
        "sum" => {
            let f: Check = Box::new(|g, v| Ok(g.sum(v[0])));
            (f, vec![uniform(rng, &[h, w, c], -1.0, 1.0)])
        }
        "dot" => {
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| g.dot(v[0], wt.clone()));
            (f, vec![uniform(rng, &[h, w, c], -1.0, 1.0)])
        }
        "condition" => {
            let size = (rng.random_range(6..14), rng.random_range(6..14));
            let x0 = rng.random_range(0.0..0.6);
            let y0 = rng.random_range(0.0..0.6);
            let b =
                BBox::new(x0, y0, x0 + rng.random_range(0.1..0.4), y0 + rng.random_range(0.1..0.4)).expect("in range");
            let m = encode(Some(&b), size);
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = condition(g, v[0], &m, v[1])?;
                g.dot(y, wt.clone())
            });
            (
                f,
                vec![
                    uniform(rng, &[h, w, c], -1.0, 1.0),
                    uniform(rng, &[3, 3, 3, c], -1.0, 1.0),
                ],
            )
        }
        "relu" => {
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.relu(v[0]);
                g.dot(y, wt.clone())
            });
            (f, vec![off_kink(rng, &[h, w, c])])
        }
        "sigmoid" => {
            let wt = proj(rng, &[h, w, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                g.dot(y, wt.clone())
            });
            (f, vec![uniform(rng, &[h, w, c], -3.0, 3.0)])
        }
        "max_pool2" => {
            let (h, w) = (2 * h, 2 * w);
            // a shuffled ramp: distinct values spaced far wider than the step
            let n = h * w * c;
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            for i in (1..n).rev() {
                vals.swap(i, rng.random_range(0..=i));
            }
            let x = Tensor::new(vec![h, w, c], vals).expect("shape");
            let wt = proj(rng, &[h / 2, w / 2, c]);
            let f: Check = Box::new(move |g, v| {
                let y = g.max_pool2(v[0])?;
                g.dot(y, wt.clone())
            });
            (f, vec![x])
        }
        "sigmoid_loss" | "sigmoid_loss_focal" => {
            let focal = (name == "sigmoid_loss_focal").then(Focal::default);
            let t = binary(rng, &[h, w, c]);
            let wts = uniform(rng, &[h, w, c], 0.5, 1.0);
            let f: Check = Box::new(move |g, v| g.sigmoid_loss(v[0], &t, Some(&wts), focal));
            (f, vec![uniform(rng, &[h, w, c], -3.0, 3.0)])
        }
        "smooth_l1" => {
            let beta = 0.1;
            let target = uniform(rng, &[h, w, c], -1.0, 1.0);
            // keep |pred - target| away from the transition at beta
            let mut pred = target.clone();
            for v in pred.data_mut() {
                let d = if rng.random_bool(0.5) {
                    rng.random_range(0.0..0.08)
                } else {
                    rng.random_range(0.12..1.0)
                };
                *v += if rng.random_bool(0.5) { d } else { -d };
            }
            let f: Check = Box::new(move |g, v| g.smooth_l1(v[0], &target, None, beta));
            (f, vec![pred])
        }
        other => panic!("no gradient check for {other}"),
    }
}

/// Linear operations first, then the nonlinear ones.
pub const OPERATIONS: [(&str, bool); 16] = [
    ("add", true),
    ("add_bias", true),
    ("mul", true),
    ("scale", true),
    ("conv2d", true),
    ("slice_channels", true),
    ("reshape", true),
    ("sum", true),
    ("dot", true),
    ("condition", true),
    ("relu", false),
    ("sigmoid", false),
    ("max_pool2", false),
    ("sigmoid_loss", false),
    ("sigmoid_loss_focal", false),
    ("smooth_l1", false),
];

/// A small detector for the end-to-end loss check.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        input_size: (8, 8),
        channels: vec![3, 4],
        grid: (4, 4),
        num_object_classes: 2,
        num_predicates: 2,
        anchors_per_cell: 1,
        head_channels: 0,
        not_visible: true,
    }
}

/// Object-mode training loss of a random model with random conditioning
/// kernels, differentiated with respect to every parameter tensor.
fn model_instance(rng: &mut ChaCha8Rng) -> Result<(Check, Vec<Tensor>)> {
    let config = check_model_config();
    let mut model = Model::new(config.clone(), rng)?;
    for p in model.parameters_mut() {
        // moderate logits everywhere: the fresh head is nearly silent, which
        // leaves early-layer gradients below the rounding floor
        if p.name.ends_with(".cond") || p.name.ends_with("bias") || p.name == "head.conv" {
            let shape = p.value.shape().to_vec();
            p.value = uniform(rng, &shape, -0.3, 0.3);
        }
    }
    let image = uniform(rng, &[8, 8, 3], 0.0, 1.0);
    let sample = TrainingSample {
        image_index: 0,
        mode: SampleMode::Object { subject: 0 },
        attention_box: Some(BBox::new(0.1, 0.2, 0.55, 0.7)?),
        targets: vec![
            Target {
                bbox: BBox::new(0.5, 0.1, 0.9, 0.45)?,
                label: 1,
                predicates: vec![0, 1],
            },
            Target {
                bbox: BBox::new(0.1, 0.2, 0.55, 0.7)?,
                label: config.num_object_classes,
                predicates: vec![1],
            },
        ],
    };
    // quadratic box loss: L1 gradients of opposite sign cancel exactly and
    // leave only rounding noise for the finite differences to see
    let loss = LossConfig {
        box_beta: 1.0,
        ..LossConfig::default()
    };
    let dense = dense_targets(&model, &sample, &loss, rng);
    let attention = sample.attention(config.input_size);
    let inputs: Vec<Tensor> = model.parameters().iter().map(|p| p.value.clone()).collect();
    let f: Check = Box::new(move |g, v| {
        let bound = Bound::from_vars(v.to_vec());
        let head = model.forward_graph(g, &bound, &image, Some(&attention))?;
        sample_loss(g, &head, &dense, &loss)
    });
    Ok((f, inputs))
}

/// Runs every operation check and the model-loss check for each seed in
/// `seeds`; returns one entry per operation with its worst error.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<Vec<OpCheck>> {
    let mut out: Vec<OpCheck> = OPERATIONS
        .iter()
        .map(|&(name, linear)| OpCheck {
            name,
            linear,
            worst: 0.0,
        })
        .collect();
    out.push(OpCheck {
        name: "model_loss",
        linear: false,
        worst: 0.0,
    });
    for seed in seeds {
        let mut rng = stage_rng(seed, "gradcheck");
        for check in out.iter_mut() {
            let (f, inputs) = if check.name == "model_loss" {
                model_instance(&mut rng)?
            } else {
                instance(check.name, &mut rng)
            };
            let step = if check.linear { LINEAR_STEP } else { STEP };
            check.worst = check.worst.max(grad_check(f, &inputs, step)?);
        }
    }
    Ok(out)
}
