//! Central finite-difference check of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function of `theta` with central
/// differences and returns the worst `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::arg(format!("step must lie in (0, 1e-3], got {eps}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(t.clone());
        let out = f(&mut tape, x)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::arg("gradient check needs a scalar output"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.param(theta.clone());
    let out = f(&mut tape, x)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite("function value at theta".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(x, theta.shape());

    let mut worst: f64 = 0.0;
    let mut probe = theta.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&Tensor::new(theta.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig - eps;
        let minus = eval(&Tensor::new(theta.shape().to_vec(), probe.clone())?)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
