//! Think-again unrolling: run `F` repeatedly over the same input, preparing
//! each pass's starting state by mixing the outputs of all earlier passes.
//!
//! Passes are memoized: the output of pass `t` is computed once and reused by
//! every later mixer call, instead of re-expanding the recursive definition.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::statefn::{SequenceBatch, StateFn, StepOutput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Last,
    Mean,
    Linear,
    Attention,
}

impl MixerKind {
    pub const NAMES: [&'static str; 4] = ["last", "mean", "linear", "attention"];
    pub const ALL: [MixerKind; 4] = [
        MixerKind::Last,
        MixerKind::Mean,
        MixerKind::Linear,
        MixerKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Last => "last",
            MixerKind::Mean => "mean",
            MixerKind::Linear => "linear",
            MixerKind::Attention => "attention",
        }
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown mixer `{s}`; expected one of {{{}}}",
                    MixerKind::NAMES.join(", ")
                ))
            })
    }
}

/// The mixing function `M`, mapping all previous pass outputs to the next
/// starting state.
#[derive(Clone, Debug, PartialEq)]
pub enum MixingFunction {
    /// The most recent state summary.
    LastOutput,
    /// Arithmetic mean of all state summaries.
    MeanOutputs,
    /// Softmax over the occupied prefix of `weights[T_max]`.
    LinearMix { weights: Tensor },
    /// `softmax_i(query · (key_w · z_i))` with a single global query.
    AttentionMix { query: Tensor, key_w: Tensor },
}

impl MixingFunction {
    /// `slots` is `T_max` for the linear mixer and ignored otherwise.
    /// Linear weights start at zero (uniform mixing); attention parameters are
    /// uniform in `[-sqrt(1/H), sqrt(1/H)]`.
    pub fn init(kind: MixerKind, hidden: usize, slots: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("mixer hidden size must be positive".into()));
        }
        Ok(match kind {
            MixerKind::Last => MixingFunction::LastOutput,
            MixerKind::Mean => MixingFunction::MeanOutputs,
            MixerKind::Linear => {
                if slots == 0 {
                    return Err(Error::Config("linear mixer needs at least one slot".into()));
                }
                MixingFunction::LinearMix {
                    weights: Tensor::zeros(&[slots]),
                }
            }
            MixerKind::Attention => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                let bound = (1.0 / hidden as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| dist.sample(&mut rng)).collect() };
                let query = Tensor::vector(draw(hidden));
                let key_w = Tensor::new(vec![hidden, hidden], draw(hidden * hidden))?;
                MixingFunction::AttentionMix { query, key_w }
            }
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            MixingFunction::LastOutput => MixerKind::Last,
            MixingFunction::MeanOutputs => MixerKind::Mean,
            MixingFunction::LinearMix { .. } => MixerKind::Linear,
            MixingFunction::AttentionMix { .. } => MixerKind::Attention,
        }
    }

    /// Linear-mixer capacity `T_max`, if bounded.
    pub fn slots(&self) -> Option<usize> {
        match self {
            MixingFunction::LinearMix { weights } => Some(weights.numel()),
            _ => None,
        }
    }

    pub fn count_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            MixingFunction::LastOutput | MixingFunction::MeanOutputs => vec![],
            MixingFunction::LinearMix { weights } => vec![("mix_weights", weights)],
            MixingFunction::AttentionMix { query, key_w } => {
                vec![("mix_query", query), ("mix_key_w", key_w)]
            }
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            MixingFunction::LastOutput | MixingFunction::MeanOutputs => vec![],
            MixingFunction::LinearMix { weights } => vec![weights],
            MixingFunction::AttentionMix { query, key_w } => vec![query, key_w],
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMixer {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        match self {
            MixingFunction::LastOutput => BoundMixer::Last,
            MixingFunction::MeanOutputs => BoundMixer::Mean,
            MixingFunction::LinearMix { weights } => BoundMixer::Linear {
                weights: put(weights),
            },
            MixingFunction::AttentionMix { query, key_w } => BoundMixer::Attention {
                query: put(query),
                key_w: put(key_w),
            },
        }
    }
}

/// A [`MixingFunction`] placed on a tape.
#[derive(Clone, Copy, Debug)]
pub enum BoundMixer {
    Last,
    Mean,
    Linear { weights: Var },
    Attention { query: Var, key_w: Var },
}

impl BoundMixer {
    pub fn vars(&self) -> Vec<Var> {
        match *self {
            BoundMixer::Last | BoundMixer::Mean => vec![],
            BoundMixer::Linear { weights } => vec![weights],
            BoundMixer::Attention { query, key_w } => vec![query, key_w],
        }
    }
}

/// `M([z_1; …; z_k])`: the next starting state from all previous outputs.
pub fn mix(tape: &mut Tape, mixer: &BoundMixer, previous: &[StepOutput]) -> Result<Var> {
    let Some(last) = previous.last() else {
        return Err(Error::Empty("mix"));
    };
    let k = previous.len();
    let summaries: Vec<Var> = previous.iter().map(|z| z.state_summary).collect();
    match *mixer {
        BoundMixer::Last => Ok(last.state_summary),
        BoundMixer::Mean => {
            let mut total = summaries[0];
            for &s in &summaries[1..] {
                total = tape.add(total, s)?;
            }
            Ok(tape.scale(total, 1.0 / k as f64))
        }
        BoundMixer::Linear { weights } => {
            let slots = tape.value(weights).numel();
            if k > slots {
                return Err(Error::LinearMixOverflow {
                    slots,
                    requested: k,
                });
            }
            let occupied = tape.narrow(weights, 0, 0, k)?;
            let w = tape.softmax(occupied, 0)?;
            let mut total = None;
            for (i, &s) in summaries.iter().enumerate() {
                let wi = tape.narrow(w, 0, i, 1)?;
                let wi = tape.reshape(wi, &[])?;
                let term = tape.mul(s, wi)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(total.expect("k >= 1"))
        }
        BoundMixer::Attention { query, key_w } => {
            let hidden = tape.value(query).numel();
            let batch = tape.shape(last.state_summary)[0];
            // query · (key_w · z) == z · (key_wᵀ · query)
            let q_row = tape.reshape(query, &[1, hidden])?;
            let projected = tape.matmul(q_row, key_w)?;
            let projected = tape.reshape(projected, &[hidden, 1])?;
            let scores: Vec<Var> = summaries
                .iter()
                .map(|&s| tape.matmul(s, projected))
                .collect::<Result<_>>()?;
            let scores = tape.concat(&scores, 1)?;
            let weights = tape.softmax(scores, 1)?;
            let spread = tape.constant(Tensor::ones(&[1, hidden]));
            let mut total = None;
            for (i, &s) in summaries.iter().enumerate() {
                let column = tape.narrow(weights, 1, i, 1)?;
                let column = tape.matmul(column, spread)?;
                debug_assert_eq!(tape.shape(column), [batch, hidden]);
                let term = tape.mul(s, column)?;
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok(total.expect("k >= 1"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThinkNetConfig {
    pub timesteps: usize,
}

/// Record of an unrolled run.
#[derive(Clone, Debug)]
pub struct ThinkNetTrace {
    /// `z_1 … z_T`.
    pub outputs: Vec<StepOutput>,
    /// The state each pass started from: `s⁽⁰⁾, s⁽¹⁾, …, s⁽ᵀ⁻¹⁾`.
    pub mixed_states: Vec<Var>,
}

/// Unrolls `T` passes of `f` on one tape so gradients reach every pass,
/// including through the mixer into earlier passes.
pub fn tn_run<F: StateFn + ?Sized>(
    tape: &mut Tape,
    f: &F,
    mixer: &BoundMixer,
    x: &SequenceBatch,
    s0: Var,
    cfg: ThinkNetConfig,
) -> Result<ThinkNetTrace> {
    if cfg.timesteps == 0 {
        return Err(Error::ZeroTimesteps);
    }
    let mut outputs = Vec::with_capacity(cfg.timesteps);
    let mut mixed_states = Vec::with_capacity(cfg.timesteps);
    let mut state = s0;
    for t in 0..cfg.timesteps {
        if t > 0 {
            state = mix(tape, mixer, &outputs)?;
        }
        mixed_states.push(state);
        outputs.push(f.apply(tape, x, state)?);
    }
    Ok(ThinkNetTrace {
        outputs,
        mixed_states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statefn::{init_params, Input, RnnConfig};

    const CFG: RnnConfig = RnnConfig {
        vocab: 2,
        embed: 3,
        hidden: 4,
        classes: 2,
    };

    fn summary_output(tape: &mut Tape, rows: &[&[f64]]) -> StepOutput {
        let v = tape.leaf(Tensor::matrix(rows).unwrap());
        StepOutput {
            state_summary: v,
            prediction: v,
            all_hiddens: None,
        }
    }

    fn batch() -> SequenceBatch {
        let xs = [
            Input::new(vec![1, 0, 1]).unwrap(),
            Input::new(vec![0, 0, 1]).unwrap(),
        ];
        SequenceBatch::new(xs.iter()).unwrap()
    }

    #[test]
    fn parses_names() {
        for kind in MixerKind::ALL {
            assert_eq!(kind.name().parse::<MixerKind>().unwrap(), kind);
        }
        let err = "gru".parse::<MixerKind>().unwrap_err().to_string();
        assert!(err.contains("last, mean, linear, attention"), "{err}");
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(MixingFunction::LastOutput.count_parameters(), 0);
        assert_eq!(MixingFunction::MeanOutputs.count_parameters(), 0);
        let att = MixingFunction::init(MixerKind::Attention, 8, 0, 1).unwrap();
        assert_eq!(att.count_parameters(), 72);
        let lin = MixingFunction::init(MixerKind::Linear, 8, 6, 1).unwrap();
        assert_eq!(lin.count_parameters(), 6);
    }

    #[test]
    fn mean_of_two_summaries() {
        let mut tape = Tape::new();
        let a = summary_output(&mut tape, &[&[1.0, 1.0]]);
        let b = summary_output(&mut tape, &[&[3.0, 3.0]]);
        let s = mix(&mut tape, &BoundMixer::Mean, &[a, b]).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 2.0]);
    }

    #[test]
    fn every_mixer_is_identity_on_a_singleton() {
        for kind in MixerKind::ALL {
            let mut tape = Tape::new();
            let m = MixingFunction::init(kind, 2, 4, 3).unwrap().bind(&mut tape, true);
            let z = summary_output(&mut tape, &[&[0.3, -0.7], &[0.1, 0.9]]);
            let s = mix(&mut tape, &m, std::slice::from_ref(&z)).unwrap();
            assert!(
                tape.value(s).bits_eq(tape.value(z.state_summary)),
                "{kind} changed a singleton"
            );
        }
    }

    #[test]
    fn zero_key_attention_is_the_mean() {
        let mut tape = Tape::new();
        let query = tape.leaf(Tensor::vector(vec![0.4, -1.2]));
        let key_w = tape.leaf(Tensor::zeros(&[2, 2]));
        let att = BoundMixer::Attention { query, key_w };
        let zs = [
            summary_output(&mut tape, &[&[1.0, 0.0], &[0.5, 0.5]]),
            summary_output(&mut tape, &[&[0.0, 2.0], &[-0.5, 0.5]]),
            summary_output(&mut tape, &[&[2.0, 1.0], &[0.0, -1.0]]),
        ];
        let a = mix(&mut tape, &att, &zs).unwrap();
        let m = mix(&mut tape, &BoundMixer::Mean, &zs).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(m).data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_errors() {
        let mut tape = Tape::new();
        assert!(matches!(mix(&mut tape, &BoundMixer::Last, &[]), Err(Error::Empty(_))));
        let lin = MixingFunction::init(MixerKind::Linear, 2, 1, 0).unwrap().bind(&mut tape, true);
        let zs = [
            summary_output(&mut tape, &[&[1.0, 0.0]]),
            summary_output(&mut tape, &[&[0.0, 1.0]]),
        ];
        assert!(matches!(
            mix(&mut tape, &lin, &zs),
            Err(Error::LinearMixOverflow {
                slots: 1,
                requested: 2
            })
        ));
    }

    #[test]
    fn single_timestep_skips_the_mixer() {
        let params = init_params(CFG, 2).unwrap();
        let mut tape = Tape::new();
        let f = params.bind(&mut tape, true);
        let x = batch();
        let s0 = f.initial_state(&mut tape, 2).unwrap();
        let before = tape.len();
        let direct = f.apply(&mut tape, &x, s0).unwrap();
        let per_pass = tape.len() - before;
        let trace = tn_run(&mut tape, &f, &BoundMixer::Mean, &x, s0, ThinkNetConfig { timesteps: 1 })
            .unwrap();
        assert_eq!(tape.len() - before, 2 * per_pass);
        assert_eq!(trace.outputs.len(), 1);
        assert_eq!(trace.mixed_states, vec![s0]);
        assert!(tape
            .value(trace.outputs[0].prediction)
            .bits_eq(tape.value(direct.prediction)));
    }

    #[test]
    fn zero_timesteps_rejected() {
        let params = init_params(CFG, 2).unwrap();
        let mut tape = Tape::new();
        let f = params.bind(&mut tape, true);
        let s0 = f.initial_state(&mut tape, 2).unwrap();
        let res = tn_run(&mut tape, &f, &BoundMixer::Last, &batch(), s0, ThinkNetConfig { timesteps: 0 });
        assert!(matches!(res, Err(Error::ZeroTimesteps)));
    }

    #[test]
    fn last_output_is_plain_state_iteration() {
        let params = init_params(CFG, 4).unwrap();
        let x = batch();
        let mut tape = Tape::new();
        let f = params.bind(&mut tape, false);
        let s0 = f.initial_state(&mut tape, 2).unwrap();
        let trace = tn_run(&mut tape, &f, &BoundMixer::Last, &x, s0, ThinkNetConfig { timesteps: 4 })
            .unwrap();

        let mut reference = Tape::new();
        let g = params.bind(&mut reference, false);
        let mut s = g.initial_state(&mut reference, 2).unwrap();
        for (t, z) in trace.outputs.iter().enumerate() {
            let out = g.apply(&mut reference, &x, s).unwrap();
            assert!(tape.value(trace.mixed_states[t]).bits_eq(reference.value(s)));
            assert!(tape.value(z.state_summary).bits_eq(reference.value(out.state_summary)));
            s = out.state_summary;
        }
    }

    #[test]
    fn state_independent_function_repeats_itself() {
        struct Constant;
        impl StateFn for Constant {
            fn state_size(&self) -> usize {
                2
            }
            fn initial_state(&self, tape: &mut Tape, batch: usize) -> Result<Var> {
                Ok(tape.constant(Tensor::zeros(&[batch, 2])))
            }
            fn apply(&self, tape: &mut Tape, x: &SequenceBatch, _state: Var) -> Result<StepOutput> {
                let n = x.size();
                let data: Vec<f64> = (0..n * 2).map(|i| x.position(0)[i / 2] as f64 + i as f64).collect();
                let v = tape.constant(Tensor::new(vec![n, 2], data)?);
                Ok(StepOutput {
                    state_summary: v,
                    prediction: v,
                    all_hiddens: None,
                })
            }
        }
        for kind in MixerKind::ALL {
            let mut tape = Tape::new();
            let m = MixingFunction::init(kind, 2, 5, 8).unwrap().bind(&mut tape, true);
            let s0 = Constant.initial_state(&mut tape, 2).unwrap();
            let trace =
                tn_run(&mut tape, &Constant, &m, &batch(), s0, ThinkNetConfig { timesteps: 5 }).unwrap();
            let first = tape.value(trace.outputs[0].prediction).clone();
            for z in &trace.outputs {
                assert!(tape.value(z.prediction).bits_eq(&first));
            }
        }
    }
}
