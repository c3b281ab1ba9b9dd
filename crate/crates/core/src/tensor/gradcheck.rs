//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Relative error with a small absolute floor so that gradients that are
/// zero on both sides do not divide by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over every coordinate of every parameter.
    pub max_relative_error: f64,
    /// Worst relative error per parameter, in input order.
    pub per_param: Vec<f64>,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar `f(params)` with central
/// differences `(f(p + h) − f(p − h)) / 2h`, one coordinate at a time.
///
/// `f` receives a fresh tape and the parameters bound as leaves, in order.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::with_finite_check(true);
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    f(&tape, &vars)?.backward()?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.into_data(),
            None => vec![0.0; p.len()],
        })
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::with_finite_check(true);
        let vars: Vec<_> = ps.iter().map(|p| tape.constant(p)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_param: vec![0.0; params.len()],
        worst: (0, 0),
        coordinates: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad[j], numeric);
            report.coordinates += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (pi, j);
            }
        }
    }
    Ok(report)
}
