//! Central finite-difference checks of tape gradients, in 64-bit.
//!
//! With `freeze_branches`, every perturbed recomputation replays the ReLU
//! masks and max-pool choices of the unperturbed pass, so the difference
//! quotient stays on the same linear piece as the analytic gradient.

use super::{BranchRecord, GradTape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Step of the central difference.
    pub step: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub freeze_branches: bool,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            floor: 1e-6,
            freeze_branches: false,
            max_entries_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn scalar(tape: &GradTape<f64>, v: Var) -> Result<f64> {
    tape.value(v)
        .item()
        .ok_or_else(|| Error::Usage("gradient check needs a scalar loss".into()))
}

fn entries(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compare the tape gradient of `f` with respect to every input against
/// central differences. `f` records a scalar loss from one leaf per input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let record = cfg.freeze_branches.then(|| tape.branch_record());

    let eval = |perturbed: &[Tensor<f64>], record: &Option<BranchRecord>| -> Result<f64> {
        let mut t = match record {
            Some(r) => GradTape::replaying(r.clone()),
            None => GradTape::new(),
        };
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &vs)?;
        scalar(&t, l)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for j in entries(inputs[i].len(), cfg.max_entries_per_input) {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + cfg.step;
            let up = eval(&work, &record)?;
            work[i].data_mut()[j] = x - cfg.step;
            let down = eval(&work, &record)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
