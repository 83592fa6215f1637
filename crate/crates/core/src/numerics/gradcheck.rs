//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;

use super::{Graph, Tensor, Var};

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of scalar `f` with central finite
/// differences of step `step`, element by element over every input, and
/// returns the worst relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            perturbed[which].data_mut()[idx] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed[which].data_mut()[idx] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic[which].data()[idx], numeric));
        }
    }
    Ok(worst)
}
