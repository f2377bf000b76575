//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default step for the central difference.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|a - n| / max(|a|, |n|, 1e-8)` over all checked entries.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Checks the gradient of `f` at `x`.
///
/// `f` receives a fresh tape and the leaf holding `x` and must return a
/// single-element node.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn grad_check_many<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Tape<T>, &[Var]) -> Result<Var>,
{
    if !(h > T::zero()) || !h.is_finite() {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }

    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get(v)).collect::<Vec<_>>()
    };

    let eval = |probe: &[Tensor<T>]| -> Result<T> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.scalar(out);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let two_h = h + h;
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;

            let numeric = ((plus - minus) / two_h).to_f64_lossy();
            let a = grad.data()[ei].to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
                report.worst_values = (a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
