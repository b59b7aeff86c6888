//! Central-difference gradient verification.

use super::{Param, Result, Tape, Tensor, TensorError};
use serde::Serialize;

/// Outcome of a finite-difference audit. `max_rel_err` is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` maximised over
/// every parameter coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare analytic gradients of a scalar loss against central differences.
///
/// `build` must construct the loss on the given tape from the given
/// parameters and return it together with the grad-enabled leaf bound for
/// each parameter, in the same order. It is invoked once for the analytic
/// pass and twice per parameter coordinate for the numeric probes.
pub fn grad_check<F>(params: &[Param], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Param]) -> Result<(Tensor, Vec<Tensor>)>,
{
    let tape = Tape::new();
    let (loss, leaves) = build(&tape, params)?;
    if leaves.len() != params.len() {
        return Err(TensorError::Contract {
            op: "grad_check",
            msg: format!("builder returned {} leaves for {} params", leaves.len(), params.len()),
        });
    }
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite { ctx: "grad_check loss" });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|leaf| leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]))
        .collect();

    let eval = |ps: &[Param]| -> Result<f64> {
        let tape = Tape::new();
        let (loss, _) = build(&tape, ps)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { ctx: "finite-difference probe" });
        }
        Ok(v)
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst_param: None,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.values.len() {
            let orig = work[pi].values[i];
            work[pi].values[i] = orig + eps;
            let f_plus = eval(&work)?;
            work[pi].values[i] = orig - eps;
            let f_minus = eval(&work)?;
            work[pi].values[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(p.name.clone());
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
