//! Central finite-difference comparison against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest disagreement found by [`check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// `(input index, element, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub worst_excess: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares the tape gradient of `f` at `inputs` with central differences.
///
/// An element passes when `|analytic − numeric| ≤ atol + rtol·|numeric|`.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64, rtol: f64, atol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[e];
            let excess = (a - numeric).abs() - (atol + rtol * numeric.abs());
            report.checked += 1;
            if excess > 0.0 {
                report.failures += 1;
            }
            if report.worst.is_none() || excess > report.worst_excess {
                report.worst_excess = excess;
                report.worst = Some((idx, e, a, numeric));
            }
        }
    }
    Ok(report)
}
