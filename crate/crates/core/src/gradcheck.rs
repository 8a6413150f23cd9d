//! Central-difference verification of tape gradients.

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tape::{Tape, Tensor};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − central| / max(|central|, 1e-12)` over all entries.
    pub max_rel_err: f64,
    /// `max |analytic − central|` over all entries.
    pub max_abs_err: f64,
    /// `(parameter index, flat entry)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Number of entries compared.
    pub entries: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`.
///
/// `f` receives a tape and the parameters bound to it and must return a
/// scalar. It is evaluated twice at the unperturbed point to reject
/// non-deterministic functions.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid("grad_check step must be positive"));
    }
    let mut tape = Tape::new();
    let bound: Vec<Tensor> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = f(&mut tape, &bound)?;
    if loss.len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = bound.iter().map(|b| grads.wrt(b)).collect();
    drop(tape);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        Ok(f(&mut t, ps)?.item())
    };
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() || first.to_bits() != loss.item().to_bits() {
        let other = if first.to_bits() != second.to_bits() { second } else { loss.item() };
        return Err(Error::NonDeterministic { first, second: other });
    }

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let mut plus = p.to_vec();
            plus[e] += step;
            let mut minus = p.to_vec();
            minus[e] -= step;
            work[pi] = Tensor::new(p.shape().to_vec(), plus)?;
            let fp = eval(&work)?;
            work[pi] = Tensor::new(p.shape().to_vec(), minus)?;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[pi][e];
            let denom = if numeric.abs() > 1e-12 { numeric.abs() } else { 1e-12 };
            let rel = (a - numeric).abs() / denom;
            report.entries += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        work[pi] = p.clone();
    }
    Ok(report)
}
