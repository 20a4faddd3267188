//! Finite-difference gradient verification.
//!
//! The checker rebuilds the computation from scratch for every probe, so it
//! stays independent of the backward implementation it is judging. Run it in
//! `f64`: central differences at h = 1e-5 need the headroom.

use super::{AutogradError, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: gradients whose analytic and numeric magnitudes
/// both sit below this are compared against the floor instead, keeping
/// finite-difference noise on near-zero entries from dominating the report.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare tape gradients of `f` against central finite differences at every
/// element of every input. `f` must be deterministic: it is re-evaluated
/// `2n + 1` times.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&Tape<'_, f64>, &[Var]) -> Result<Var, AutogradError>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .map(|&v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v).0, tape.shape(v).1))
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, AutogradError> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t, false)).collect();
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checks: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for input_idx in 0..inputs.len() {
        for elem in 0..inputs[input_idx].len() {
            let orig = work[input_idx].data()[elem];
            work[input_idx].data_mut()[elem] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[input_idx].data_mut()[elem] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[input_idx].data_mut()[elem] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[input_idx].data()[elem];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checks += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (input_idx, elem);
            }
        }
    }
    Ok(report)
}
