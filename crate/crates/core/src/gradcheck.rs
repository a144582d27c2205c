//! Central finite-difference gradient checking in 64-bit.
//!
//! The numeric side only ever evaluates the forward function on a
//! no-grad tape, so it shares no code path with [`Tape::backward`].

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor for the relative error, so that gradients that are
/// zero analytically and numerically do not divide by zero.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input index, element index)` of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Check `d f / d inputs` for a scalar-valued `f`. Every element of every
/// input is perturbed by `±step`.
pub fn check<G>(inputs: &[Tensor<f64>], step: f64, f: G) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_subset(inputs, step, usize::MAX, f)
}

/// Like [`check`] but perturbs at most `max_per_input` evenly spaced
/// elements of each input.
pub fn check_subset<G>(
    inputs: &[Tensor<f64>],
    step: f64,
    max_per_input: usize,
    f: G,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or(zeros);
        let stride = n.div_ceil(max_per_input.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let r = rel_err(analytic[j], numeric);
            report.max_abs_err = report.max_abs_err.max((analytic[j] - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
