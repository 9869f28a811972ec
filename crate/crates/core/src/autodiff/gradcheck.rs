//! Central-difference gradient verification.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator so that coordinates with a true
/// gradient of zero do not divide by zero.
const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Allowance for accumulated rounding in the objective, in units of machine
/// epsilon times `max(|f|, 1)`.
const ROUNDING_UNITS: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Estimated absolute rounding noise of the central difference,
    /// `64 · ε · max(|f|, 1) / h`.
    pub noise_floor: f64,
    /// `(analytic, numeric)` for every coordinate, in parameter order.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    /// True when every coordinate agrees within `tol` relative error, or
    /// differs by less than the noise floor when its gradient is too small
    /// for a central difference to resolve.
    pub fn within(&self, tol: f64) -> bool {
        self.pairs.iter().all(|&(a, n)| {
            let diff = (a - n).abs();
            diff <= tol * a.abs().max(n.abs()).max(DENOMINATOR_FLOOR) || diff <= self.noise_floor
        })
    }

    /// Coordinates that fail `tol` in relative terms but sit under the noise floor.
    pub fn below_noise(&self, tol: f64) -> usize {
        self.pairs
            .iter()
            .filter(|&&(a, n)| {
                let diff = (a - n).abs();
                diff > tol * a.abs().max(n.abs()).max(DENOMINATOR_FLOOR) && diff <= self.noise_floor
            })
            .count()
    }
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares `backward()` against `(f(p+h) − f(p−h)) / 2h` on every
/// coordinate of every parameter and returns the worst relative error,
/// measured against `max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds its objective on the tape it is given from the supplied leaf
/// handles, one per entry of `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_on(Tape::new(), f, params, h)
}

/// As [`finite_diff_check`], but the analytic gradient is taken on `tape`,
/// which must be empty. Perturbed evaluations always use fresh tapes.
pub fn finite_diff_check_on<F>(mut tape: Tape, f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if !tape.is_empty() {
        return Err(Error::Config("gradient check needs an empty tape".into()));
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let first = tape.value(out).item();
    let grads = tape.backward(out)?;

    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        noise_floor: ROUNDING_UNITS * f64::EPSILON * first.abs().max(1.0) / h,
        pairs: Vec::new(),
    };
    let mut perturbed = params.to_vec();
    for (pi, (param, &var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, param.shape());
        for ci in 0..param.numel() {
            let base = param.data()[ci];
            perturbed[pi].data_mut()[ci] = base + h;
            let plus = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[ci] = base - h;
            let minus = evaluate(&f, &perturbed)?;
            perturbed[pi].data_mut()[ci] = base;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ci];
            let denom = a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            report.pairs.push((a, numeric));
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
