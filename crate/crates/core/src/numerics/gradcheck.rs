//! Central finite differences, independent of the tape's backward rules.
//!
//! The checker only ever runs forward passes: it perturbs one input scalar at a
//! time, re-evaluates the closure and compares the slope with the analytic value.

use super::{Array, FD_ABS_TOL, FD_REL_TOL, FD_ROUNDOFF, FD_STEP};

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Mismatch {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Whether an analytic and a numeric derivative agree under the checker tolerances.
pub fn agrees(analytic: f64, numeric: f64) -> bool {
    agrees_within(analytic, numeric, FD_ABS_TOL)
}

pub fn agrees_within(analytic: f64, numeric: f64, abs_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_tol || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Absolute floor for slopes of a function whose value is about `value`.
/// Rounding in the two evaluations is divided by the step, so a derivative
/// that is exactly zero reads as noise of order `eps * |value| / step`.
pub fn roundoff_floor(value: f64) -> f64 {
    FD_ABS_TOL.max(FD_ROUNDOFF * (1.0 + value.abs()) / FD_STEP)
}

/// Numerical gradient of `f` with respect to every element of every input.
pub fn numeric_gradients(inputs: &[Array], f: &mut dyn FnMut(&[Array]) -> f64) -> Vec<Array> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Array::zeros(inputs[i].shape());
        for e in 0..inputs[i].len() {
            let base = work[i].data()[e];
            work[i].data_mut()[e] = base + FD_STEP;
            let up = f(&work);
            work[i].data_mut()[e] = base - FD_STEP;
            let down = f(&work);
            work[i].data_mut()[e] = base;
            g.data_mut()[e] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Compares analytic gradients with central differences of `f` and returns every
/// element that disagrees.
pub fn compare(inputs: &[Array], analytic: &[Array], f: &mut dyn FnMut(&[Array]) -> f64) -> Vec<Mismatch> {
    compare_within(inputs, analytic, f, FD_ABS_TOL)
}

/// As [`compare`] with an explicit absolute floor.
pub fn compare_within(
    inputs: &[Array],
    analytic: &[Array],
    f: &mut dyn FnMut(&[Array]) -> f64,
    abs_tol: f64,
) -> Vec<Mismatch> {
    assert_eq!(inputs.len(), analytic.len());
    let numeric = numeric_gradients(inputs, f);
    let mut bad = Vec::new();
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shape for input {i}");
        for (e, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            if !agrees_within(x, y, abs_tol) {
                bad.push(Mismatch {
                    input: i,
                    element: e,
                    analytic: x,
                    numeric: y,
                });
            }
        }
    }
    bad
}
