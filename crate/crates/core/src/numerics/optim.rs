use super::Tensor;

/// A trainable array with its gradient accumulator and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
            momentum,
        }
    }

    /// Adds `scale * g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &Tensor, scale: f64) {
        debug_assert_eq!(g.shape(), self.value.shape());
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Heavy-ball SGD: `buf = momentum * buf + grad; value -= lr * buf`.
/// Gradients are cleared afterwards.
pub fn sgd_momentum_step<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, learning_rate: f64, momentum: f64) {
    for p in params {
        let Parameter {
            value,
            grad,
            momentum: buf,
            ..
        } = p;
        for ((v, g), b) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(buf.data_mut().iter_mut())
        {
            *b = momentum * *b + g;
            *v -= learning_rate * *b;
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Parameter {
        Parameter::new("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn plain_descent_subtracts_gradient() {
        let mut p = [param(&[1.0, -2.0])];
        let g = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        p[0].accumulate_grad(&g, 1.0);
        sgd_momentum_step(&mut p, 1.0, 0.0);
        assert_eq!(p[0].value.data(), &[0.75, -1.5]);
        assert!(p[0].grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = [param(&[3.0, 4.0])];
        sgd_momentum_step(&mut p, 0.5, 0.9);
        assert_eq!(p[0].value.data(), &[3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        let (lr, mu) = (0.1, 0.9);
        let (g1, g2) = (0.7, -0.3);
        let mut p = [param(&[2.0])];
        p[0].accumulate_grad(&Tensor::scalar(g1), 1.0);
        sgd_momentum_step(&mut p, lr, mu);
        p[0].accumulate_grad(&Tensor::scalar(g2), 1.0);
        sgd_momentum_step(&mut p, lr, mu);
        // hand-unrolled: b1 = g1, x1 = x0 - lr b1; b2 = mu b1 + g2, x2 = x1 - lr b2
        let b1 = g1;
        let x1 = 2.0 - lr * b1;
        let b2 = mu * b1 + g2;
        let x2 = x1 - lr * b2;
        assert!((p[0].value.data()[0] - x2).abs() < 1e-12);
        assert!((p[0].momentum.data()[0] - b2).abs() < 1e-12);
    }
}
