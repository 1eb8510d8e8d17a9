//! Central finite-difference verification of reverse-mode gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input tensor and flat coordinate of the worst error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Per input tensor, in input order.
    pub tensors: Vec<TensorCheck>,
}

/// Agreement for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    /// Worst per-coordinate relative error.
    pub max_rel_error: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-8)`.
    pub norm_rel_error: f64,
    /// Worst `|analytic − numeric|`.
    pub max_abs_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Checks the gradient of a scalar function of one tensor.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.data(out)[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tensors: Vec::with_capacity(inputs.len()),
    };
    let mut work = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            max_rel_error: 0.0,
            norm_rel_error: 0.0,
            max_abs_error: 0.0,
            analytic: grads.clone(),
            numeric: Vec::with_capacity(grads.len()),
        };
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for i in 0..inputs[t].numel() {
            let original = work[t].data()[i];
            work[t].data_mut()[i] = original + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = original - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            check.max_rel_error = check.max_rel_error.max(err);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.numeric.push(numeric);
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (t, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        check.norm_rel_error = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-8);
        report.tensors.push(check);
    }
    Ok(report)
}
