//! Named invariant suite run by `thinknet selftest`.
//!
//! Each check returns a one-line detail on success or a reason on failure.
//! The suite can be pointed at a tape whose max backward rule is
//! deliberately wrong, to confirm the gradient checks notice.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check_on, Reduction, Tape, Var};
use crate::deltaloss::{delta_loss, delta_loss_naive, final_loss, periodic_delta_loss, LossMode, LossSeries};
use crate::error::Result;
use crate::statefn::{init_params, Input, RnnConfig, SequenceBatch, StateFn};
use crate::tasks::{Example, TaskSpec};
use crate::tensor::Tensor;
use crate::thinknet::{tn_run, MixerKind, MixingFunction, ThinkNetConfig};
use crate::trainer::{batch_gradient_check, train_run, Checkpoint, RunConfig, ThinkNetModel, TrainConfig};

/// Trials per operation in the gradient checks.
pub const OP_TRIALS: usize = 100;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Seed of the frozen end-to-end gradient fixture.
pub const GRADIENT_FIXTURE_SEED: u64 = 1;

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Run gradient checks on a tape that doubles the max gradient.
    pub corrupt_max_gradient: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for InvariantResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} ({:.2}s): {}", self.name, self.seconds, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct SelftestReport {
    pub results: Vec<InvariantResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

type Check = std::result::Result<String, String>;

fn record(results: &mut Vec<InvariantResult>, name: impl Into<String>, check: impl FnOnce() -> Check) {
    let started = Instant::now();
    let outcome = check();
    let seconds = started.elapsed().as_secs_f64();
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    results.push(InvariantResult {
        name: name.into(),
        passed,
        detail,
        seconds,
    });
}

fn err(e: crate::error::Error) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive extents")
}

/// Weights in `±[0.5, 1.5]`, so the projected gradient has no near-zero entries by construction.
fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// `Σ w ⊙ y` with constant `w`, reducing any op output to a scalar.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Names of the operations covered by the per-op gradient checks.
pub const CHECKED_OPS: [&str; 18] = [
    "add", "sub", "mul", "mul-scalar", "scale", "matmul", "tanh", "sigmoid", "relu", "softmax", "concat",
    "narrow", "reshape", "sum", "mean", "max", "gather_rows", "cross_entropy",
];

/// Runs [`OP_TRIALS`] randomized gradient checks of one operation and
/// returns the worst relative error.
pub fn op_gradient_error(op: &str, seed: u64, make_tape: fn() -> Tape) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(op.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)));
    let mut worst: f64 = 0.0;
    for _ in 0..OP_TRIALS {
        let r = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=4);
        let a = uniform(&mut rng, &[r, c], -2.0, 2.0);
        let report = match op {
            "add" | "sub" | "mul" => {
                let b = uniform(&mut rng, &[r, c], -2.0, 2.0);
                let w = projection(&mut rng, &[r, c]);
                let op = op.to_string();
                finite_diff_check_on(
                    make_tape(),
                    move |t, p| {
                        let y = match op.as_str() {
                            "add" => t.add(p[0], p[1])?,
                            "sub" => t.sub(p[0], p[1])?,
                            _ => t.mul(p[0], p[1])?,
                        };
                        project(t, y, &w)
                    },
                    &[a, b],
                    FD_STEP,
                )?
            }
            "mul-scalar" => {
                let s = Tensor::scalar(rng.gen_range(-2.0..2.0));
                let w = projection(&mut rng, &[r, c]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.mul(p[1], p[0])?;
                        project(t, y, &w)
                    },
                    &[a, s],
                    FD_STEP,
                )?
            }
            "scale" => {
                let factor = rng.gen_range(-2.0..2.0);
                let w = projection(&mut rng, &[r, c]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.scale(p[0], factor);
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "matmul" => {
                let n = rng.gen_range(1..=4);
                let b = uniform(&mut rng, &[c, n], -2.0, 2.0);
                let w = projection(&mut rng, &[r, n]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.matmul(p[0], p[1])?;
                        project(t, y, &w)
                    },
                    &[a, b],
                    FD_STEP,
                )?
            }
            "tanh" | "sigmoid" | "relu" => {
                // Keep relu inputs off the kink.
                let a = if op == "relu" { a.map(|x| if x.abs() < 1e-2 { x + 0.5 } else { x }) } else { a };
                let w = projection(&mut rng, &[r, c]);
                let op = op.to_string();
                finite_diff_check_on(
                    make_tape(),
                    move |t, p| {
                        let y = match op.as_str() {
                            "tanh" => t.tanh(p[0]),
                            "sigmoid" => t.sigmoid(p[0]),
                            _ => t.relu(p[0]),
                        };
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "softmax" => {
                let axis = rng.gen_range(0..2);
                let w = projection(&mut rng, &[r, c]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.softmax(p[0], axis)?;
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "concat" => {
                let axis = rng.gen_range(0..2);
                let extra = rng.gen_range(1..=3);
                let (b_shape, out) = if axis == 0 {
                    ([extra, c], [r + extra, c])
                } else {
                    ([r, extra], [r, c + extra])
                };
                let b = uniform(&mut rng, &b_shape, -2.0, 2.0);
                let w = projection(&mut rng, &out);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.concat(&[p[0], p[1]], axis)?;
                        project(t, y, &w)
                    },
                    &[a, b],
                    FD_STEP,
                )?
            }
            "narrow" => {
                let start = rng.gen_range(0..c);
                let len = rng.gen_range(1..=c - start);
                let w = projection(&mut rng, &[r, len]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.narrow(p[0], 1, start, len)?;
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "reshape" => {
                let w = projection(&mut rng, &[c, r]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.reshape(p[0], &[c, r])?;
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "sum" | "mean" | "max" => {
                let kind = match op {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => Reduction::Max,
                };
                // Separate the top two entries so a step of h cannot swap them.
                let mut a = a;
                if kind == Reduction::Max && a.numel() > 1 {
                    let data = a.data_mut();
                    let top = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    for x in data.iter_mut() {
                        if *x != top && top - *x < 1e-2 {
                            *x -= 1e-2;
                        }
                    }
                }
                let w = projection(&mut rng, &[]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.reduce(kind, p[0]);
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "gather_rows" => {
                let rows: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..r)).collect();
                let w = projection(&mut rng, &[rows.len(), c]);
                finite_diff_check_on(
                    make_tape(),
                    |t, p| {
                        let y = t.gather_rows(p[0], &rows)?;
                        project(t, y, &w)
                    },
                    &[a],
                    FD_STEP,
                )?
            }
            "cross_entropy" => {
                let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
                finite_diff_check_on(make_tape(), |t, p| t.cross_entropy(p[0], &labels), &[a], FD_STEP)?
            }
            other => {
                return Err(crate::error::Error::Config(format!("no gradient check for op {other}")));
            }
        };
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// Configuration of the small end-to-end gradient fixture: attention mixer,
/// delta loss with the max gradient flowing, three passes, four examples.
pub fn gradient_fixture(seed: u64) -> RunConfig {
    RunConfig {
        task: TaskSpec::parity(3, 16, seed),
        train_fraction: 0.5,
        net: RnnConfig {
            vocab: 2,
            embed: 3,
            hidden: 6,
            classes: 2,
        },
        mixer: MixerKind::Attention,
        mixer_slots: 12,
        train: TrainConfig {
            t_train: 3,
            loss_mode: LossMode::Delta,
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        },
    }
}

/// Parameters of [`gradient_fixture`] at a generic point: every entry
/// uniform in `[−1, 1]`. At the initial point the passes barely differ and
/// the attention gradients sit near the finite-difference noise floor.
pub fn gradient_fixture_model(seed: u64) -> Result<ThinkNetModel> {
    let mut model = ThinkNetModel::init(&gradient_fixture(seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    for t in model.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    Ok(model)
}

/// End-to-end relative error of the fixture's first training batch.
pub fn end_to_end_gradient_error(seed: u64, make_tape: fn() -> Tape) -> Result<f64> {
    let run = gradient_fixture(seed);
    let (train_set, _) = run.datasets()?;
    let model = gradient_fixture_model(seed)?;
    let batch: Vec<&Example> = train_set.examples.iter().take(4).collect();
    Ok(batch_gradient_check(make_tape(), &model, &batch, &run.train, FD_STEP)?.max_rel_error)
}

fn random_series(tape: &mut Tape, rng: &mut ChaCha8Rng, len: usize) -> Result<(Var, LossSeries)> {
    // L_t = Σ (a_t − w)² over three coordinates, a value in [0, 9.72].
    let w = tape.leaf(uniform(rng, &[3], -0.9, 0.9));
    let mut losses = Vec::with_capacity(len);
    for _ in 0..len {
        let a = tape.constant(uniform(rng, &[3], -0.9, 0.9));
        let d = tape.sub(a, w)?;
        let sq = tape.mul(d, d)?;
        losses.push(tape.sum(sq));
    }
    Ok((w, LossSeries::new(losses)?))
}

fn telescoping(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut value_gap, mut grad_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let len = rng.gen_range(1..=8);
        let mut tape = Tape::new();
        let (w, series) = random_series(&mut tape, &mut rng, len).map_err(err)?;
        let d = delta_loss(&mut tape, &series).map_err(err)?;
        let naive = delta_loss_naive(&mut tape, &series).map_err(err)?;
        value_gap = value_gap.max((tape.value(d).item() - tape.value(naive).item()).abs());
        let g1 = tape.backward(d).map_err(err)?.get_or_zeros(w, &[3]);
        let g2 = tape.backward(naive).map_err(err)?.get_or_zeros(w, &[3]);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            grad_gap = grad_gap.max((a - b).abs());
        }
    }
    if value_gap < 1e-12 && grad_gap < 1e-10 {
        Ok(format!("200 series, value gap {value_gap:.1e}, gradient gap {grad_gap:.1e}"))
    } else {
        Err(format!("value gap {value_gap:.3e}, gradient gap {grad_gap:.3e}"))
    }
}

fn collapse_and_anti_gaming(seed: u64) -> Check {
    let mut tape = Tape::new();
    let spike = LossSeries::from_values(&mut tape, &[1.0, 9.0, 2.0]).map_err(err)?;
    let d = delta_loss(&mut tape, &spike).map_err(err)?;
    let f = final_loss(&spike);
    if tape.value(d).item() != 10.0 || tape.value(f).item() != 2.0 {
        return Err(format!(
            "[1, 9, 2]: delta {} final {}",
            tape.value(d).item(),
            tape.value(f).item()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..100 {
        let len = rng.gen_range(1..=8);
        let mut values: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..10.0)).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        let series = LossSeries::from_values(&mut tape, &values).map_err(err)?;
        let d = delta_loss(&mut tape, &series).map_err(err)?;
        let last = *values.last().expect("len >= 1");
        if tape.value(d).item().to_bits() != last.to_bits() {
            return Err(format!("case {case}: {values:?} gives {}", tape.value(d).item()));
        }
    }
    Ok("[1, 9, 2] → 10 vs 2; 100 non-increasing series collapse exactly".into())
}

fn periodic(seed: u64) -> Check {
    let mut tape = Tape::new();
    let spike = LossSeries::from_values(&mut tape, &[1.0, 9.0, 2.0]).map_err(err)?;
    let p2 = periodic_delta_loss(&mut tape, &spike, 2).map_err(err)?;
    let p1 = periodic_delta_loss(&mut tape, &spike, 1).map_err(err)?;
    if tape.value(p2).item() != 3.0 || tape.value(p1).item() != 10.0 {
        return Err(format!("[1, 9, 2]: p=2 {} p=1 {}", tape.value(p2).item(), tape.value(p1).item()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..100 {
        let len = rng.gen_range(1..=8);
        let values: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..10.0)).collect();
        let series = LossSeries::from_values(&mut tape, &values).map_err(err)?;
        let a = periodic_delta_loss(&mut tape, &series, 1).map_err(err)?;
        let b = delta_loss(&mut tape, &series).map_err(err)?;
        if tape.value(a).item().to_bits() != tape.value(b).item().to_bits() {
            return Err(format!("case {case}: p=1 differs on {values:?}"));
        }
    }
    Ok("p=1 matches delta on 100 series; [1, 9, 2] → 3 (p=2), 10 (p=1)".into())
}

fn random_tokens(rng: &mut ChaCha8Rng, batch: usize, len: usize, vocab: usize) -> Vec<Input> {
    (0..batch)
        .map(|_| Input::new((0..len).map(|_| rng.gen_range(0..vocab)).collect()).expect("len >= 1"))
        .collect()
}

const SMALL_NET: RnnConfig = RnnConfig {
    vocab: 3,
    embed: 3,
    hidden: 4,
    classes: 3,
};

fn t1_reduction(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..50 {
        let params = init_params(SMALL_NET, rng.gen()).map_err(err)?;
        let (batch, len) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        let inputs = random_tokens(&mut rng, batch, len, SMALL_NET.vocab);
        let x = SequenceBatch::new(&inputs).map_err(err)?;
        let s0 = uniform(&mut rng, &[x.size(), SMALL_NET.hidden], -1.0, 1.0);
        for kind in MixerKind::ALL {
            let mixer = MixingFunction::init(kind, SMALL_NET.hidden, 4, rng.gen()).map_err(err)?;
            let mut tape = Tape::new();
            let f = params.bind(&mut tape, true);
            let m = mixer.bind(&mut tape, true);
            let s = tape.leaf(s0.clone());
            let trace = tn_run(&mut tape, &f, &m, &x, s, ThinkNetConfig { timesteps: 1 }).map_err(err)?;
            let direct = f.apply(&mut tape, &x, s).map_err(err)?;
            let z = &trace.outputs[0];
            if !tape.value(z.prediction).bits_eq(tape.value(direct.prediction))
                || !tape.value(z.state_summary).bits_eq(tape.value(direct.state_summary))
            {
                return Err(format!("trial {trial}, mixer {kind}: T=1 differs from F(x, s0)"));
            }
        }
    }
    Ok("50 random (params, x, s0), all mixers, bitwise".into())
}

fn prefix_consistency(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(SMALL_NET, seed).map_err(err)?;
    let inputs = random_tokens(&mut rng, 3, 4, SMALL_NET.vocab);
    let x = SequenceBatch::new(&inputs).map_err(err)?;
    for kind in MixerKind::ALL {
        let mixer = MixingFunction::init(kind, SMALL_NET.hidden, 5, seed).map_err(err)?;
        let run = |timesteps| -> Result<Vec<(Tensor, Tensor)>> {
            let mut tape = Tape::new();
            let f = params.bind(&mut tape, true);
            let m = mixer.bind(&mut tape, true);
            let s0 = f.initial_state(&mut tape, x.size())?;
            let trace = tn_run(&mut tape, &f, &m, &x, s0, ThinkNetConfig { timesteps })?;
            Ok(trace
                .outputs
                .iter()
                .map(|z| (tape.value(z.state_summary).clone(), tape.value(z.prediction).clone()))
                .collect())
        };
        for t in 1..=4 {
            let short = run(t).map_err(err)?;
            let long = run(t + 1).map_err(err)?;
            for (i, (a, b)) in short.iter().zip(&long).enumerate() {
                if !a.0.bits_eq(&b.0) || !a.1.bits_eq(&b.1) {
                    return Err(format!("mixer {kind}: output {} differs between T={t} and T={}", i + 1, t + 1));
                }
            }
        }
    }
    Ok("T ∈ 1..4, all mixers, bitwise".into())
}

fn gradient_reach(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(SMALL_NET, seed).map_err(err)?;
    let inputs = random_tokens(&mut rng, 3, 4, SMALL_NET.vocab);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..SMALL_NET.classes)).collect();
    let x = SequenceBatch::new(&inputs).map_err(err)?;
    for kind in [MixerKind::Linear, MixerKind::Attention] {
        let mut mixer = MixingFunction::init(kind, SMALL_NET.hidden, 4, seed).map_err(err)?;
        // Linear weights start at zero, where the slot gradients can still be nonzero; perturb them anyway.
        for t in mixer.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let mut tape = Tape::new();
        let f = params.bind(&mut tape, true);
        let m = mixer.bind(&mut tape, true);
        let s0 = f.initial_state(&mut tape, x.size()).map_err(err)?;
        let trace = tn_run(&mut tape, &f, &m, &x, s0, ThinkNetConfig { timesteps: 3 }).map_err(err)?;
        let last = trace.outputs.last().expect("T = 3");
        let loss = tape.cross_entropy(last.prediction, &labels).map_err(err)?;
        let grads = tape.backward(loss).map_err(err)?;
        for v in m.vars() {
            let g = grads.get_or_zeros(v, tape.shape(v));
            if g.max_abs() == 0.0 {
                return Err(format!("mixer {kind}: zero gradient on a mixer parameter"));
            }
        }
    }
    Ok("final-pass loss reaches every linear and attention mixer parameter".into())
}

fn tiny_run(seed: u64) -> RunConfig {
    RunConfig {
        task: TaskSpec::modsum(3, 3, 48, seed),
        train_fraction: 0.75,
        net: SMALL_NET,
        mixer: MixerKind::Attention,
        mixer_slots: 8,
        train: TrainConfig {
            t_train: 2,
            loss_mode: LossMode::DeltaPeriodic(2),
            epochs: 2,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        },
    }
}

fn determinism_and_round_trip(seed: u64) -> Check {
    let run = tiny_run(seed);
    let (a, rows_a) = train_run(&run).map_err(err)?;
    let (b, rows_b) = train_run(&run).map_err(err)?;
    if rows_a.len() != rows_b.len() || !rows_a.iter().zip(&rows_b).all(|(x, y)| x.same_numbers(y)) {
        return Err("repeated training produced different metrics".into());
    }
    if a.model != b.model {
        return Err("repeated training produced different parameters".into());
    }
    let text = a.to_text().map_err(err)?;
    let back = Checkpoint::from_text(&text).map_err(err)?;
    let (_, test) = run.datasets().map_err(err)?;
    let before = a.evaluate(&test, 4).map_err(err)?;
    let after = back.evaluate(&test, 4).map_err(err)?;
    if !before.bits_eq(&after) || back.to_text().map_err(err)? != text {
        return Err("checkpoint round trip changed the model".into());
    }
    Ok("repeat training bitwise; save/load/evaluate bitwise".into())
}

fn softmax_stability() -> Check {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(&[&[1e3, -1e3, 999.0], &[-1e3, -1e3, -1e3]]).map_err(err)?);
    let y = tape.softmax(x, 1).map_err(err)?;
    let v = tape.value(y);
    if !v.is_finite() {
        return Err("non-finite softmax at magnitude 1e3".into());
    }
    for row in v.data().chunks(3) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(format!("row sums to {s}"));
        }
    }
    Ok("finite and normalized at magnitude 1e3".into())
}

fn max_one_hot(make_tape: fn() -> Tape) -> Check {
    let mut tape = make_tape();
    let a = tape.leaf(Tensor::vector(vec![0.5, 3.0, -1.0, 3.0]));
    let m = tape.max(a);
    let g = tape.backward(m).map_err(err)?;
    let got = g.get_or_zeros(a, &[4]);
    if got.data() == [0.0, 1.0, 0.0, 0.0] {
        Ok("one-hot at the earliest argmax".into())
    } else {
        Err(format!("max gradient {:?}", got.data()))
    }
}

fn plain_tape() -> Tape {
    Tape::new()
}

fn corrupted_tape() -> Tape {
    Tape::with_corrupted_max_gradient()
}

/// Runs the whole suite. Results are in a fixed order.
pub fn run_selftest(options: SelftestOptions) -> SelftestReport {
    let make_tape: fn() -> Tape = if options.corrupt_max_gradient { corrupted_tape } else { plain_tape };
    let seed = options.seed;
    let mut results = Vec::new();
    for op in CHECKED_OPS {
        record(&mut results, format!("gradient/{op}"), || match op_gradient_error(op, seed, make_tape) {
            Ok(e) if e < FD_TOLERANCE => Ok(format!("{OP_TRIALS} trials, max relative error {e:.2e}")),
            Ok(e) => Err(format!("max relative error {e:.3e} exceeds {FD_TOLERANCE:.0e}")),
            Err(e) => Err(e.to_string()),
        });
    }
    record(&mut results, "gradient/end-to-end", || match end_to_end_gradient_error(GRADIENT_FIXTURE_SEED, make_tape) {
        Ok(e) if e < FD_TOLERANCE => Ok(format!("attention + delta, T=3, batch 4, max relative error {e:.2e}")),
        Ok(e) => Err(format!("max relative error {e:.3e} exceeds {FD_TOLERANCE:.0e}")),
        Err(e) => Err(e.to_string()),
    });
    record(&mut results, "max-subgradient", || max_one_hot(make_tape));
    record(&mut results, "softmax-stability", softmax_stability);
    record(&mut results, "telescoping-identity", || telescoping(seed));
    record(&mut results, "delta-collapse-and-spike", || collapse_and_anti_gaming(seed));
    record(&mut results, "periodic-max", || periodic(seed));
    record(&mut results, "t1-reduction", || t1_reduction(seed));
    record(&mut results, "prefix-consistency", || prefix_consistency(seed));
    record(&mut results, "mixer-gradient-reach", || gradient_reach(seed));
    record(&mut results, "determinism-and-checkpoint", || determinism_and_round_trip(seed));
    SelftestReport { results }
}
