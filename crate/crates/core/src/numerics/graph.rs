//! Dynamic reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients into every node that
//! depends on a leaf created with `requires_grad`.

use crate::error::{Error, Result};

use super::conv::{self, ConvGeom, Padding};
use super::loss::{self, sigmoid, Focal};
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Dot(Var, Tensor),
    /// Loss nodes cache d(loss)/d(input) at forward time.
    Loss {
        input: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a per-channel bias `[C]` along the trailing dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.channels();
        if vb.shape() != [c] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", vb.shape(), vx.shape()),
            ));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * factor).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x.max(0.0)).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| sigmoid(x)).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Bias-free cross-correlation of `[H, W, C_in]` with `[k, k, C_in, C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::resolve(self.value(input), self.value(kernel), stride, padding)?;
        let out = conv::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let t = Tensor::new(vec![geom.h_out, geom.w_out, geom.c_out], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, geom }, rg))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (t, argmax) = conv::max_pool2_forward(self.value(input))?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Channels `start..start+len` of the trailing dimension.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        let c = v.channels();
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_channels",
                format!("{start}..{} of {c}", start + len),
            ));
        }
        let data = v
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::SliceChannels { input, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Reshape(input), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `sum(a * weights)` with constant weights.
    pub fn dot(&mut self, a: Var, weights: Tensor) -> Result<Var> {
        let va = self.value(a);
        va.same_shape(&weights, "dot")?;
        let s = va.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, weights), rg))
    }

    /// Weighted mean sigmoid loss against binary targets; see
    /// [`loss::sigmoid_loss`] for the normalization.
    pub fn sigmoid_loss(
        &mut self,
        logits: Var,
        targets: &Tensor,
        weights: Option<&Tensor>,
        focal: Option<Focal>,
    ) -> Result<Var> {
        let v = self.value(logits);
        v.same_shape(targets, "sigmoid_loss")?;
        if let Some(w) = weights {
            v.same_shape(w, "sigmoid_loss weights")?;
        }
        if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::shape("sigmoid_loss", "targets must be 0 or 1"));
        }
        let (l, grad) = loss::sigmoid_loss(v.data(), targets.data(), weights.map(|w| w.data()), focal);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(l), Op::Loss { input: logits, grad }, rg))
    }

    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, weights: Option<&Tensor>, beta: f64) -> Result<Var> {
        let v = self.value(pred);
        v.same_shape(target, "smooth_l1")?;
        if let Some(w) = weights {
            v.same_shape(w, "smooth_l1 weights")?;
        }
        let (l, grad) = loss::smooth_l1(v.data(), target.data(), weights.map(|w| w.data()), beta);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(l), Op::Loss { input: pred, grad }, rg))
    }

    /// Reverse pass from the scalar `root`. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |t| add_into(t, gd));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |t| add_into(t, gd));
                let c = self.value(*bias).len();
                self.accumulate(grads, *bias, |t| {
                    for row in gd.chunks(c) {
                        add_into(t, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |t| {
                    for ((o, gv), y) in t.iter_mut().zip(gd).zip(vb) {
                        *o += gv * y;
                    }
                });
                self.accumulate(grads, *b, |t| {
                    for ((o, gv), x) in t.iter_mut().zip(gd).zip(va) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, |t| {
                    for (o, gv) in t.iter_mut().zip(gd) {
                        *o += gv * f;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |t| {
                    for ((o, gv), xv) in t.iter_mut().zip(gd).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                self.accumulate(grads, *a, |t| {
                    for ((o, gv), yv) in t.iter_mut().zip(gd).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Conv2d { input, kernel, geom } => {
                let (x, k) = (self.value(*input).data(), self.value(*kernel).data());
                let mut gi = self.rg(*input).then(|| vec![0.0; x.len()]);
                let mut gk = self.rg(*kernel).then(|| vec![0.0; k.len()]);
                conv::conv2d_backward(geom, x, k, gd, gi.as_deref_mut(), gk.as_deref_mut());
                if let Some(gi) = gi {
                    self.accumulate(grads, *input, |t| add_into(t, &gi));
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, *kernel, |t| add_into(t, &gk));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                self.accumulate(grads, *input, |t| {
                    for (&src, gv) in argmax.iter().zip(gd) {
                        t[src] += gv;
                    }
                });
            }
            Op::SliceChannels { input, start } => {
                let c = self.value(*input).channels();
                let len = self.nodes[i].value.channels();
                self.accumulate(grads, *input, |t| {
                    for (row, grow) in t.chunks_mut(c).zip(gd.chunks(len)) {
                        add_into(&mut row[*start..*start + len], grow);
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |t| add_into(t, gd));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |t| t.iter_mut().for_each(|o| *o += s));
            }
            Op::Dot(a, w) => {
                let s = gd[0];
                self.accumulate(grads, *a, |t| {
                    for (o, wv) in t.iter_mut().zip(w.data()) {
                        *o += s * wv;
                    }
                });
            }
            Op::Loss { input, grad } => {
                let s = gd[0];
                self.accumulate(grads, *input, |t| {
                    for (o, gv) in t.iter_mut().zip(grad) {
                        *o += s * gv;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
