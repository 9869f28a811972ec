//! Per-timestep loss series and the objectives built from them.
//!
//! The delta objective sums the improvements `L_{t+1} − L_t` over
//! `t = 1..T−1` and adds the largest loss of the series. The sum telescopes
//! to `L_T − L_1`, which is the form [`delta_loss`] evaluates; the max term
//! keeps a model from inflating an intermediate loss just to harvest a large
//! drop afterwards.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scalar losses `L⁽¹⁾ … L⁽ᵀ⁾`, one per timestep.
#[derive(Clone, Debug)]
pub struct LossSeries {
    losses: Vec<Var>,
}

impl LossSeries {
    pub fn new(losses: Vec<Var>) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::Empty("loss series"));
        }
        Ok(Self { losses })
    }

    /// Places plain values on `tape` as differentiable leaves.
    pub fn from_values(tape: &mut Tape, values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect())
    }

    pub fn losses(&self) -> &[Var] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        self.losses.iter().map(|&l| tape.value(l).item()).collect()
    }

    fn first(&self) -> Var {
        self.losses[0]
    }

    fn last(&self) -> Var {
        *self.losses.last().expect("non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Only the last timestep's loss.
    Final,
    Delta,
    /// Delta objective whose max term only looks at checkpoint timesteps
    /// `t` with `(t − 1) mod p == 0`.
    DeltaPeriodic(usize),
}

impl LossMode {
    pub fn period(self) -> Option<usize> {
        match self {
            LossMode::DeltaPeriodic(p) => Some(p),
            _ => None,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossMode::Final => f.write_str("final"),
            LossMode::Delta => f.write_str("delta"),
            LossMode::DeltaPeriodic(p) => write!(f, "delta-periodic:{p}"),
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(LossMode::Final),
            "delta" => Ok(LossMode::Delta),
            _ => {
                let period = s.strip_prefix("delta-periodic:").ok_or_else(|| {
                    Error::Parse(format!(
                        "unknown loss mode `{s}`; expected final, delta or delta-periodic:<p>"
                    ))
                })?;
                let p: usize = period
                    .parse()
                    .map_err(|_| Error::Parse(format!("invalid period `{period}` in `{s}`")))?;
                if p == 0 {
                    return Err(Error::InvalidPeriod(0));
                }
                Ok(LossMode::DeltaPeriodic(p))
            }
        }
    }
}

fn max_over(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let column: Vec<Var> = losses
        .iter()
        .map(|&l| tape.reshape(l, &[1]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat(&column, 0)?;
    Ok(tape.max(stacked))
}

/// `L_T + (max − L_1)`. Grouping the max with `L_1` makes the result exactly
/// `L_T` whenever `L_1` is the maximum.
fn endpoints_plus(tape: &mut Tape, series: &LossSeries, max: Var) -> Result<Var> {
    let excess = tape.sub(max, series.first())?;
    tape.add(series.last(), excess)
}

/// Telescoped delta objective `L_T − L_1 + max_t L_t`.
pub fn delta_loss(tape: &mut Tape, series: &LossSeries) -> Result<Var> {
    let max = max_over(tape, series.losses())?;
    endpoints_plus(tape, series, max)
}

/// `Σ_{t=1}^{T−1} (L_{t+1} − L_t) + max_t L_t` without cancelling terms.
/// Test oracle for [`delta_loss`].
pub fn delta_loss_naive(tape: &mut Tape, series: &LossSeries) -> Result<Var> {
    let max = max_over(tape, series.losses())?;
    let mut total = None;
    for pair in series.losses().windows(2) {
        let step = tape.sub(pair[1], pair[0])?;
        total = Some(match total {
            None => step,
            Some(acc) => tape.add(acc, step)?,
        });
    }
    match total {
        None => Ok(max),
        Some(sum) => tape.add(sum, max),
    }
}

/// Delta objective with the max restricted to timesteps `1, 1+p, 1+2p, …`.
pub fn periodic_delta_loss(tape: &mut Tape, series: &LossSeries, period: usize) -> Result<Var> {
    if period == 0 {
        return Err(Error::InvalidPeriod(0));
    }
    let checkpoints: Vec<Var> = series.losses().iter().copied().step_by(period).collect();
    let max = max_over(tape, &checkpoints)?;
    endpoints_plus(tape, series, max)
}

/// `L_T`.
pub fn final_loss(series: &LossSeries) -> Var {
    series.last()
}

/// Builds the training objective for `mode`. With `detach_max` the max term
/// contributes its value but no gradient.
pub fn apply_mode(
    tape: &mut Tape,
    series: &LossSeries,
    mode: LossMode,
    detach_max: bool,
) -> Result<Var> {
    let checkpoints: Vec<Var> = match mode {
        LossMode::Final => return Ok(final_loss(series)),
        LossMode::Delta => series.losses().to_vec(),
        LossMode::DeltaPeriodic(p) => {
            if p == 0 {
                return Err(Error::InvalidPeriod(0));
            }
            series.losses().iter().copied().step_by(p).collect()
        }
    };
    let mut max = max_over(tape, &checkpoints)?;
    if detach_max {
        max = tape.detach(max);
    }
    endpoints_plus(tape, series, max)
}

/// `∂ objective / ∂ L_t` for every timestep of a plain-valued series.
pub fn loss_gradient_profile(values: &[f64], mode: LossMode) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let series = LossSeries::from_values(&mut tape, values)?;
    let objective = apply_mode(&mut tape, &series, mode, false)?;
    let grads = tape.backward(objective)?;
    Ok(series
        .losses()
        .iter()
        .map(|&l| grads.get(l).map_or(0.0, |g| g.item()))
        .collect())
}
