//! Central finite-difference verification of tape gradients.

use crate::error::{bail, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-4;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over the
    /// checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the coordinate attaining the maximum.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval<F>(f: &F, input: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let y = f(&mut tape, x)?;
    let v = tape.value(y).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` at `input` against central
/// differences at every coordinate.
pub fn gradcheck<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..input.len()).collect();
    gradcheck_at(f, input, eps, &coords)
}

/// Like [`gradcheck`], restricted to the given flat coordinates.
pub fn gradcheck_at<F>(f: F, input: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        bail!(Contract, "finite-difference step must be positive, got {eps}");
    }
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let zeros = Tensor::zeros(input.shape().to_vec());
    let analytic = grads.get(x).unwrap_or(&zeros);

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = input.clone();
    for &i in coords {
        if i >= input.len() {
            bail!(Contract, "coordinate {i} out of range for {} values", input.len());
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
