//! Central finite differences — the independent gradient oracle.
//!
//! Deliberately uses nothing from the tape machinery beyond forward
//! evaluation, so it stays a valid check of `backward`.

use super::Tensor;
use crate::{Error, Result};

/// Floor in the relative-error denominator; avoids 0/0 on parameters with
/// (near-)zero gradient while staying far above central-difference noise.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Central-difference gradient of a scalar-valued function at `point`.
///
/// Evaluates `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate. `f` must
/// be deterministic; it is called with perturbed copies of `point`.
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Numeric(format!("step size must be positive, got {h}")));
    }
    let base = point.to_vec();
    let shape = point.shape();
    let probe = Tensor::zeros(&shape);
    let mut grad = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + h;
        probe.set_data(&work)?;
        let plus = f(&probe)?;
        work[i] = base[i] - h;
        probe.set_data(&work)?;
        let minus = f(&probe)?;
        work[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_vec(grad, &shape)
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
