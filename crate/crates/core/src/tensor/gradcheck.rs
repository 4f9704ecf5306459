use super::Tensor;
use crate::error::{Error, Result};

/// `(f(x + eps) - f(x - eps)) / 2 eps`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Compares analytic gradients against central differences.
///
/// `f` evaluates a scalar loss at the given inputs and returns it together
/// with the analytic gradient for every input (same shapes, same order).
/// Every entry of every input is probed. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let (value, analytic) = f(inputs)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            input: 0,
            entry: 0,
            context: "loss at the unperturbed point".into(),
        });
    }
    if analytic.len() != inputs.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            left: vec![inputs.len()],
            right: vec![analytic.len()],
        });
    }
    for (x, g) in inputs.iter().zip(&analytic) {
        x.expect_same_shape(g, "grad_check gradient")?;
    }

    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..inputs.len() {
        for e in 0..inputs[t].len() {
            let x0 = inputs[t].values()[e];
            probe[t].values_mut()[e] = x0 + epsilon;
            let plus = f(&probe)?.0;
            probe[t].values_mut()[e] = x0 - epsilon;
            let minus = f(&probe)?.0;
            probe[t].values_mut()[e] = x0;
            let a = analytic[t].values()[e];
            if !(plus.is_finite() && minus.is_finite() && a.is_finite()) {
                return Err(Error::NonFinite {
                    input: t,
                    entry: e,
                    context: format!("f(x+eps) = {plus}, f(x-eps) = {minus}, analytic = {a}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
