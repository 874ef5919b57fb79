use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with half-width `step`.
///
/// Returns the largest per-coordinate
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`. Any error or
/// non-finite value along the way yields `f64::INFINITY`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point.clone().requires_grad(true));
        let loss = match f(&mut tape, x) {
            Ok(l) => l,
            Err(_) => return f64::INFINITY,
        };
        if tape.backward(loss).is_err() {
            return f64::INFINITY;
        }
        match tape.grad(x) {
            Some(g) => g.into_data(),
            None => vec![0.0; point.len()],
        }
    };

    let eval = |t: Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(t);
        match f(&mut tape, x) {
            Ok(l) if tape.shape(l) == [1] => tape.value(l).item(),
            _ => f64::NAN,
        }
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * step);
        if !numeric.is_finite() || !a.is_finite() {
            return f64::INFINITY;
        }
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
