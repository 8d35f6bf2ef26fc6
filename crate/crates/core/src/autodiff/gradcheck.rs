use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub enum GradCheckStatus {
    Passed,
    Failed,
    /// One-sided differences disagree at some coordinate: a kink such as a
    /// tie in a minimum or `|x|` at zero. The comparison is skipped.
    NonDifferentiable { coordinates: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub status: GradCheckStatus,
    /// `max |analytic - numeric| / max(|analytic|∞, |numeric|∞)`.
    pub max_rel_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == GradCheckStatus::Passed
    }

    pub fn skipped(&self) -> bool {
        matches!(self.status, GradCheckStatus::NonDifferentiable { .. })
    }
}

fn eval_plain<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let y = f(&tape, x)?;
    let v = y.item()?;
    if !v.is_finite() {
        return Err(Error::numeric("grad_check", format!("f evaluated to {v}")));
    }
    Ok(v)
}

/// Checks `f`'s reverse-mode gradient at `x` against central differences with step `step`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let tape = Tape::new();
    let xv = tape.var(x);
    let y = f(&tape, &xv)?;
    let fx = y.item()?;
    if !fx.is_finite() {
        return Err(Error::numeric("grad_check", format!("f(x) = {fx}")));
    }
    let analytic = if y.node().is_some() {
        tape.backward(&y)?.tensor_for(&xv).to_vec()
    } else {
        vec![0.0; x.len()]
    };

    let mut numeric = vec![0.0; x.len()];
    let mut kinks = Vec::new();
    let base = x.to_vec();
    for i in 0..x.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + step;
        let fp = eval_plain(&f, &Tensor::raw(x.shape().to_vec(), probe.clone()))?;
        probe[i] = base[i] - step;
        let fm = eval_plain(&f, &Tensor::raw(x.shape().to_vec(), probe))?;
        numeric[i] = (fp - fm) / (2.0 * step);
        let forward = (fp - fx) / step;
        let backward = (fx - fm) / step;
        let jump = (forward - backward).abs();
        if jump > 1e-6_f64.max(1e-2 * forward.abs().max(backward.abs())) {
            kinks.push(i);
        }
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let max_dev = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    let max_rel_error = if scale > 0.0 { max_dev / scale } else { 0.0 };

    let status = if !kinks.is_empty() {
        GradCheckStatus::NonDifferentiable { coordinates: kinks }
    } else if max_rel_error <= tol {
        GradCheckStatus::Passed
    } else {
        GradCheckStatus::Failed
    };
    Ok(GradCheckReport {
        status,
        max_rel_error,
        analytic,
        numeric,
    })
}
