//! Scalar losses: stable sigmoid binary cross-entropy (optionally focal) and
//! smooth-L1 box regression.

use serde::{Deserialize, Serialize};

/// Focal modulation of the sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Focal {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for Focal {
    fn default() -> Self {
        Focal {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln(sigmoid(z))`, accurate for large `|z|`.
fn neg_log_sigmoid(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-element loss and its derivative with respect to the logit.
pub(crate) fn sigmoid_loss_elem(x: f64, t: f64, focal: Option<Focal>) -> (f64, f64) {
    match focal {
        None => {
            // max(x,0) - x t + ln(1 + e^-|x|)
            let l = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            (l, sigmoid(x) - t)
        }
        Some(Focal { gamma, alpha }) => {
            // p_t = sigmoid(z) with z = x for positives, -x for negatives
            let (z, sign, a) = if t >= 0.5 {
                (x, 1.0, alpha)
            } else {
                (-x, -1.0, 1.0 - alpha)
            };
            let p = sigmoid(z);
            let nls = neg_log_sigmoid(z);
            let q = 1.0 - p;
            let l = a * q.powf(gamma) * nls;
            // dFL/dz = a (1-p)^g [ -g p ln p ... ] written with ln p = -nls
            let dz = a * q.powf(gamma) * (-gamma * p * nls - q);
            (l, sign * dz)
        }
    }
}

/// Weighted mean of per-element sigmoid losses. Without weights every element
/// counts once; with weights the sum is divided by the total weight.
/// Returns the loss and the gradient with respect to every logit.
pub(crate) fn sigmoid_loss(
    logits: &[f64],
    targets: &[f64],
    weights: Option<&[f64]>,
    focal: Option<Focal>,
) -> (f64, Vec<f64>) {
    let norm = match weights {
        Some(w) => w.iter().sum::<f64>(),
        None => logits.len() as f64,
    };
    let mut grad = vec![0.0; logits.len()];
    if norm <= 0.0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..logits.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let (l, d) = sigmoid_loss_elem(logits[i], targets[i], focal);
        total += w * l;
        grad[i] = w * d / norm;
    }
    (total / norm, grad)
}

/// Weighted mean smooth-L1 (Huber) loss with transition point `beta`.
pub(crate) fn smooth_l1(pred: &[f64], target: &[f64], weights: Option<&[f64]>, beta: f64) -> (f64, Vec<f64>) {
    let norm = match weights {
        Some(w) => w.iter().sum::<f64>(),
        None => pred.len() as f64,
    };
    let mut grad = vec![0.0; pred.len()];
    if norm <= 0.0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let d = pred[i] - target[i];
        let (l, g) = if d.abs() < beta {
            (0.5 * d * d / beta, d / beta)
        } else {
            (d.abs() - 0.5 * beta, d.signum())
        };
        total += w * l;
        grad[i] = w * g / norm;
    }
    (total / norm, grad)
}
