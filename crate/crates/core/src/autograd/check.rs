use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compare the tape gradient of a scalar function against central
/// differences. Returns the largest `|analytic - numeric| / max(1, |numeric|)`
/// over all coordinates of `point`.
pub fn check_gradient<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.var(point.clone());
        let y = f(&x)?;
        tape.grad(&y, &[&x])?.remove(0).value()
    };
    check_against(&f, point, analytic.data(), eps)
}

/// Same as [`check_gradient`] but against a caller-supplied gradient.
pub fn check_against<F>(f: &F, point: &Tensor, analytic: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        Ok(f(&x)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
