//! The state-dependent function `F(x, s)`: a tanh recurrent encoder with a
//! linear classification head.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Input {
    tokens: Vec<usize>,
}

impl Input {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("input sequence"));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Equal-length inputs laid out position-major for batched recurrence.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    size: usize,
    by_position: Vec<Vec<usize>>,
}

impl SequenceBatch {
    pub fn new<'a>(inputs: impl IntoIterator<Item = &'a Input>) -> Result<Self> {
        let inputs: Vec<&Input> = inputs.into_iter().collect();
        let Some(first) = inputs.first() else {
            return Err(Error::Empty("sequence batch"));
        };
        let len = first.len();
        if let Some(bad) = inputs.iter().find(|x| x.len() != len) {
            return Err(Error::ShapeMismatch {
                op: "sequence batch",
                lhs: vec![len],
                rhs: vec![bad.len()],
            });
        }
        let by_position = (0..len)
            .map(|i| inputs.iter().map(|x| x.tokens[i]).collect())
            .collect();
        Ok(Self {
            size: inputs.len(),
            by_position,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seq_len(&self) -> usize {
        self.by_position.len()
    }

    pub fn position(&self, i: usize) -> &[usize] {
        &self.by_position[i]
    }
}

/// A hidden state of shape `[H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub hidden: Tensor,
}

impl State {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden: Tensor::zeros(&[hidden]),
        }
    }
}

/// One pass of `F` over a batch. Every field is a tape handle.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Final hidden state of the pass, `[B×H]`.
    pub state_summary: Var,
    /// Class logits, `[B×C]`.
    pub prediction: Var,
    /// Hidden state after every input position, each `[B×H]`.
    pub all_hiddens: Option<Vec<Var>>,
}

/// Contract for any function usable as the inner step of a think-again run.
pub trait StateFn {
    /// Extent `H` of the state vector.
    fn state_size(&self) -> usize;

    /// The learned initial state broadcast to a `[B×H]` batch.
    fn initial_state(&self, tape: &mut Tape, batch: usize) -> Result<Var>;

    /// Runs one full pass over `x` starting from `state` (`[B×H]`).
    fn apply(&self, tape: &mut Tape, x: &SequenceBatch, state: Var) -> Result<StepOutput>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed == 0 || self.hidden == 0 || self.classes == 0 {
            return Err(Error::Config(format!("all network extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub const RNN_PARAM_NAMES: [&str; 7] =
    ["embedding", "w_in", "w_rec", "b", "head_w", "head_b", "s0"];

#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub config: RnnConfig,
    pub embedding: Tensor,
    pub w_in: Tensor,
    pub w_rec: Tensor,
    pub b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// Learned initial state `s⁽⁰⁾`, shared across examples.
    pub s0: Tensor,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

/// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]` weights; biases and `s0` zero.
/// The embedding table counts as a one-hot input layer with `fan_in = vocab`.
pub fn init_params(config: RnnConfig, seed: u64) -> Result<RnnParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let RnnConfig {
        vocab,
        embed,
        hidden,
        classes,
    } = config;
    Ok(RnnParams {
        config,
        embedding: uniform_matrix(&mut rng, vocab, embed, vocab),
        w_in: uniform_matrix(&mut rng, embed, hidden, embed),
        w_rec: uniform_matrix(&mut rng, hidden, hidden, hidden),
        b: Tensor::zeros(&[hidden]),
        head_w: uniform_matrix(&mut rng, hidden, classes, hidden),
        head_b: Tensor::zeros(&[classes]),
        s0: Tensor::zeros(&[hidden]),
    })
}

impl RnnParams {
    pub fn zeros(config: RnnConfig) -> Result<Self> {
        config.validate()?;
        let RnnConfig {
            vocab,
            embed,
            hidden,
            classes,
        } = config;
        Ok(Self {
            config,
            embedding: Tensor::zeros(&[vocab, embed]),
            w_in: Tensor::zeros(&[embed, hidden]),
            w_rec: Tensor::zeros(&[hidden, hidden]),
            b: Tensor::zeros(&[hidden]),
            head_w: Tensor::zeros(&[hidden, classes]),
            head_b: Tensor::zeros(&[classes]),
            s0: Tensor::zeros(&[hidden]),
        })
    }

    /// Tensors in [`RNN_PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.embedding,
            &self.w_in,
            &self.w_rec,
            &self.b,
            &self.head_w,
            &self.head_b,
            &self.s0,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.embedding,
            &mut self.w_in,
            &mut self.w_rec,
            &mut self.b,
            &mut self.head_w,
            &mut self.head_b,
            &mut self.s0,
        ]
    }

    /// Expected shapes, in [`RNN_PARAM_NAMES`] order.
    pub fn expected_shapes(config: &RnnConfig) -> [Vec<usize>; 7] {
        let RnnConfig {
            vocab,
            embed,
            hidden,
            classes,
        } = *config;
        [
            vec![vocab, embed],
            vec![embed, hidden],
            vec![hidden, hidden],
            vec![hidden],
            vec![hidden, classes],
            vec![classes],
            vec![hidden],
        ]
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundRnn {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundRnn {
            config: self.config,
            embedding: put(&self.embedding),
            w_in: put(&self.w_in),
            w_rec: put(&self.w_rec),
            b: put(&self.b),
            head_w: put(&self.head_w),
            head_b: put(&self.head_b),
            s0: put(&self.s0),
        }
    }
}

/// [`RnnParams`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundRnn {
    pub config: RnnConfig,
    pub embedding: Var,
    pub w_in: Var,
    pub w_rec: Var,
    pub b: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub s0: Var,
}

impl BoundRnn {
    pub fn vars(&self) -> [Var; 7] {
        [
            self.embedding,
            self.w_in,
            self.w_rec,
            self.b,
            self.head_w,
            self.head_b,
            self.s0,
        ]
    }
}

/// `[B×n]` copy of a rank-1 `[n]` vector, via `ones[B×1] · v[1×n]`.
pub(crate) fn rows_of(tape: &mut Tape, v: Var, batch: usize) -> Result<Var> {
    let n = tape.value(v).numel();
    let row = tape.reshape(v, &[1, n])?;
    let ones = tape.constant(Tensor::ones(&[batch, 1]));
    tape.matmul(ones, row)
}

impl StateFn for BoundRnn {
    fn state_size(&self) -> usize {
        self.config.hidden
    }

    fn initial_state(&self, tape: &mut Tape, batch: usize) -> Result<Var> {
        rows_of(tape, self.s0, batch)
    }

    fn apply(&self, tape: &mut Tape, x: &SequenceBatch, state: Var) -> Result<StepOutput> {
        let batch = x.size();
        let hidden = self.config.hidden;
        if tape.shape(state) != [batch, hidden] {
            return Err(Error::ShapeMismatch {
                op: "rnn state",
                lhs: vec![batch, hidden],
                rhs: tape.shape(state).to_vec(),
            });
        }
        let bias = rows_of(tape, self.b, batch)?;
        let mut h = state;
        let mut hiddens = Vec::with_capacity(x.seq_len());
        for i in 0..x.seq_len() {
            let e = tape.gather_rows(self.embedding, x.position(i))?;
            let from_input = tape.matmul(e, self.w_in)?;
            let from_state = tape.matmul(h, self.w_rec)?;
            let pre = tape.add(from_input, from_state)?;
            let pre = tape.add(pre, bias)?;
            h = tape.tanh(pre);
            hiddens.push(h);
        }
        let head_bias = rows_of(tape, self.head_b, batch)?;
        let logits = tape.matmul(h, self.head_w)?;
        let prediction = tape.add(logits, head_bias)?;
        Ok(StepOutput {
            state_summary: h,
            prediction,
            all_hiddens: Some(hiddens),
        })
    }
}

/// Batch-mean cross-entropy of the prediction against `labels`.
pub fn loss_of(tape: &mut Tape, output: &StepOutput, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(output.prediction, labels)
}

/// Values of a single-example pass, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StepValues {
    pub state_summary: Tensor,
    pub prediction: Tensor,
    pub all_hiddens: Tensor,
}

/// `F(x, s)` for one example.
pub fn rnn_apply(params: &RnnParams, x: &Input, s: &State) -> Result<StepValues> {
    let hidden = params.config.hidden;
    if s.hidden.shape() != [hidden] {
        return Err(Error::ShapeMismatch {
            op: "rnn state",
            lhs: vec![hidden],
            rhs: s.hidden.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let f = params.bind(&mut tape, false);
    let state = tape.constant(s.hidden.reshaped(&[1, hidden])?);
    let out = f.apply(&mut tape, &SequenceBatch::new([x])?, state)?;
    let hiddens = out.all_hiddens.as_deref().unwrap_or_default();
    let stacked = tape.concat(hiddens, 0)?;
    Ok(StepValues {
        state_summary: tape.value(out.state_summary).reshaped(&[hidden])?,
        prediction: tape
            .value(out.prediction)
            .reshaped(&[params.config.classes])?,
        all_hiddens: tape.value(stacked).clone(),
    })
}
