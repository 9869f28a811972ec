//! Mini-batch training of the recurrent step function and mixer under a
//! chosen loss mode, plus evaluation at arbitrary timestep counts.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, RngDescriptor};
pub use optim::{adam_step, clip_global_norm, sgd_step, AdamState, OptimizerKind};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check_on, GradCheckReport, Tape, Var};
use crate::deltaloss::{apply_mode, LossMode, LossSeries};
use crate::error::{Error, Result};
use crate::statefn::{init_params, BoundRnn, RnnConfig, RnnParams, SequenceBatch, StateFn, RNN_PARAM_NAMES};
use crate::tasks::{split, Dataset, Example, TaskSpec};
use crate::tensor::Tensor;
use crate::thinknet::{tn_run, BoundMixer, MixerKind, MixingFunction, ThinkNetConfig, ThinkNetTrace};

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Stream of the shuffling generator; init draws use streams 0 and 1.
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Think-again timesteps per training forward pass.
    pub t_train: usize,
    #[serde(with = "loss_mode_string")]
    pub loss_mode: LossMode,
    /// Block the gradient of the max term.
    pub detach_max: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_train: 3,
            loss_mode: LossMode::Delta,
            detach_max: false,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 32,
            grad_clip: Some(5.0),
            seed: 1,
            optimizer: OptimizerKind::ADAM_DEFAULT,
        }
    }
}

mod loss_mode_string {
    use super::LossMode;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mode: &LossMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&mode.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LossMode, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

/// The complete, self-describing description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train_fraction: f64,
    pub net: RnnConfig,
    pub mixer: MixerKind,
    /// Weight slots `T_max` reserved by the linear mixer.
    pub mixer_slots: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskSpec::parity(8, 4096, 1);
        Self {
            net: RnnConfig {
                vocab: task.vocab(),
                embed: 32,
                hidden: 32,
                classes: task.classes(),
            },
            task,
            train_fraction: 0.8,
            mixer: MixerKind::Attention,
            mixer_slots: 12,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        let t = &self.train;
        if t.t_train == 0 {
            return Err(Error::ZeroTimesteps);
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", t.learning_rate)));
        }
        if let Some(clip) = t.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::Config(format!("gradient clip must be positive, got {clip}")));
            }
        }
        if let LossMode::DeltaPeriodic(0) = t.loss_mode {
            return Err(Error::InvalidPeriod(0));
        }
        if self.net.vocab != self.task.vocab() || self.net.classes != self.task.classes() {
            return Err(Error::Config(format!(
                "network vocab/classes {}/{} do not match task {}/{}",
                self.net.vocab,
                self.net.classes,
                self.task.vocab(),
                self.task.classes()
            )));
        }
        if self.mixer == MixerKind::Linear && self.mixer_slots < t.t_train {
            return Err(Error::Config(format!(
                "linear mixer slots ({}) must cover t_train ({})",
                self.mixer_slots, t.t_train
            )));
        }
        Ok(())
    }

    /// Regenerates the train and test splits from the task tuple.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        split(&self.task.generate()?, self.train_fraction)
    }

    /// Short identifier for reports.
    pub fn id(&self) -> String {
        format!(
            "{}-n{}-{}-{}-T{}-s{}",
            self.task.task,
            self.task.n,
            self.mixer,
            self.train.loss_mode,
            self.train.t_train,
            self.train.seed
        )
    }
}

/// The step function's parameters together with the mixer's.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinkNetModel {
    pub rnn: RnnParams,
    pub mixer: MixingFunction,
}

/// A [`ThinkNetModel`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub rnn: BoundRnn,
    pub mixer: BoundMixer,
}

impl BoundModel {
    /// Handles in [`ThinkNetModel::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut vars = self.rnn.vars().to_vec();
        vars.extend(self.mixer.vars());
        vars
    }

    /// Rebuilds a bound model from handles in [`BoundModel::vars`] order.
    pub fn from_vars(config: RnnConfig, mixer: MixerKind, vars: &[Var]) -> Result<Self> {
        let extra = match mixer {
            MixerKind::Last | MixerKind::Mean => 0,
            MixerKind::Linear => 1,
            MixerKind::Attention => 2,
        };
        if vars.len() != RNN_PARAM_NAMES.len() + extra {
            return Err(Error::Config(format!(
                "{mixer} model needs {} handles, got {}",
                RNN_PARAM_NAMES.len() + extra,
                vars.len()
            )));
        }
        let rnn = BoundRnn {
            config,
            embedding: vars[0],
            w_in: vars[1],
            w_rec: vars[2],
            b: vars[3],
            head_w: vars[4],
            head_b: vars[5],
            s0: vars[6],
        };
        let mixer = match mixer {
            MixerKind::Last => BoundMixer::Last,
            MixerKind::Mean => BoundMixer::Mean,
            MixerKind::Linear => BoundMixer::Linear { weights: vars[7] },
            MixerKind::Attention => BoundMixer::Attention {
                query: vars[7],
                key_w: vars[8],
            },
        };
        Ok(Self { rnn, mixer })
    }
}

impl ThinkNetModel {
    pub fn init(run: &RunConfig) -> Result<Self> {
        let seed = run.train.seed;
        Ok(Self {
            rnn: init_params(run.net, seed)?,
            mixer: MixingFunction::init(run.mixer, run.net.hidden, run.mixer_slots, seed)?,
        })
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> =
            RNN_PARAM_NAMES.into_iter().zip(self.rnn.tensors()).collect();
        out.extend(self.mixer.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.rnn.tensors_mut().into_iter().collect();
        out.extend(self.mixer.tensors_mut());
        out
    }

    pub fn count_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            rnn: self.rnn.bind(tape, trainable),
            mixer: self.mixer.bind(tape, trainable),
        }
    }

    fn check_horizon(&self, timesteps: usize) -> Result<()> {
        if timesteps == 0 {
            return Err(Error::ZeroTimesteps);
        }
        match self.mixer.slots() {
            Some(slots) if timesteps > slots => Err(Error::LinearMixOverflow {
                slots,
                requested: timesteps,
            }),
            _ => Ok(()),
        }
    }
}

/// Forward result for one batch: the trace plus the loss of every pass.
pub struct BatchForward {
    pub trace: ThinkNetTrace,
    pub series: LossSeries,
}

/// Unrolls `timesteps` passes over `examples` and attaches a batch-mean
/// cross-entropy to every pass.
pub fn forward_batch(
    tape: &mut Tape,
    model: &BoundModel,
    examples: &[&Example],
    timesteps: usize,
) -> Result<BatchForward> {
    let x = SequenceBatch::new(examples.iter().map(|e| &e.input))?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let s0 = model.rnn.initial_state(tape, examples.len())?;
    let trace = tn_run(tape, &model.rnn, &model.mixer, &x, s0, ThinkNetConfig { timesteps })?;
    let losses = trace
        .outputs
        .iter()
        .map(|z| tape.cross_entropy(z.prediction, &labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchForward {
        trace,
        series: LossSeries::new(losses)?,
    })
}

/// Checks the full training gradient of one batch (step function, mixer and
/// loss mode including the max term) against central differences. The
/// analytic pass runs on `tape`. A detached max has no finite-difference
/// counterpart, so `train.detach_max` is rejected.
pub fn batch_gradient_check(
    tape: Tape,
    model: &ThinkNetModel,
    examples: &[&Example],
    train: &TrainConfig,
    h: f64,
) -> Result<GradCheckReport> {
    model.check_horizon(train.t_train)?;
    if train.detach_max {
        return Err(Error::Config("gradient check needs the max term live".into()));
    }
    let params: Vec<Tensor> = model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let kind = model.mixer.kind();
    let config = model.rnn.config;
    finite_diff_check_on(
        tape,
        |tape, vars| {
            let bound = BoundModel::from_vars(config, kind, vars)?;
            let fwd = forward_batch(tape, &bound, examples, train.t_train)?;
            apply_mode(tape, &fwd.series, train.loss_mode, train.detach_max)
        },
        &params,
        h,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Mean objective over the epoch's batches, in the run's loss mode.
    pub train_loss: f64,
    /// Mean over the epoch's batches of each timestep's loss.
    pub per_timestep_losses: Vec<f64>,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

impl MetricsRow {
    /// Bitwise equality of every field except wall time.
    pub fn same_numbers(&self, other: &MetricsRow) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.test_accuracy.to_bits() == other.test_accuracy.to_bits()
            && self.per_timestep_losses.len() == other.per_timestep_losses.len()
            && self
                .per_timestep_losses
                .iter()
                .zip(&other.per_timestep_losses)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Dataset-mean loss at each timestep `1..=t_eval`.
    pub per_timestep_losses: Vec<f64>,
    /// Accuracy of each timestep's prediction.
    pub accuracies: Vec<f64>,
}

impl Evaluation {
    pub fn t_eval(&self) -> usize {
        self.accuracies.len()
    }

    pub fn bits_eq(&self, other: &Evaluation) -> bool {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        same(&self.per_timestep_losses, &other.per_timestep_losses)
            && same(&self.accuracies, &other.accuracies)
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Per-timestep loss and accuracy without updating any parameter.
pub fn evaluate(model: &ThinkNetModel, dataset: &Dataset, t_eval: usize) -> Result<Evaluation> {
    model.check_horizon(t_eval)?;
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut loss_sums = vec![0.0; t_eval];
    let mut correct = vec![0usize; t_eval];
    for chunk in dataset.examples.chunks(EVAL_CHUNK) {
        let examples: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let fwd = forward_batch(&mut tape, &bound, &examples, t_eval)?;
        for (t, (z, &loss)) in fwd.trace.outputs.iter().zip(fwd.series.losses()).enumerate() {
            loss_sums[t] += tape.value(loss).item() * chunk.len() as f64;
            correct[t] += argmax_rows(tape.value(z.prediction))
                .iter()
                .zip(chunk)
                .filter(|(p, e)| **p == e.label)
                .count();
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        per_timestep_losses: loss_sums.iter().map(|s| s / n).collect(),
        accuracies: correct.iter().map(|&c| c as f64 / n).collect(),
    })
}

enum OptimizerState {
    Sgd,
    Adam {
        state: AdamState,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerState {
    fn new(kind: OptimizerKind, model: &ThinkNetModel) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => OptimizerState::Adam {
                state: AdamState::new(model.named_tensors().into_iter().map(|(_, t)| t)),
                beta1,
                beta2,
                eps,
            },
        }
    }

    fn step(&mut self, model: &mut ThinkNetModel, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = model.tensors_mut();
        match self {
            OptimizerState::Sgd => sgd_step(&mut params, grads, lr),
            OptimizerState::Adam {
                state,
                beta1,
                beta2,
                eps,
            } => adam_step(state, &mut params, grads, lr, *beta1, *beta2, *eps),
        }
    }
}

/// Trains a fresh model on `train_set`, scoring `test_set` after every epoch.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    run: &RunConfig,
) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    run.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let cfg = &run.train;
    let mut model = ThinkNetModel::init(run)?;
    let mut optimizer = OptimizerState::new(cfg.optimizer, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut objective_sum = 0.0;
        let mut step_sums = vec![0.0; cfg.t_train];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let fwd = forward_batch(&mut tape, &bound, &examples, cfg.t_train)?;
            let objective = apply_mode(&mut tape, &fwd.series, cfg.loss_mode, cfg.detach_max)?;
            let value = tape.value(objective).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let grad_map = tape.backward(objective)?;
            let mut grads: Vec<Tensor> = bound
                .vars()
                .into_iter()
                .map(|v| grad_map.get_or_zeros(v, tape.shape(v)))
                .collect();
            if let Some(clip) = cfg.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            optimizer.step(&mut model, &grads, cfg.learning_rate)?;

            objective_sum += value;
            for (acc, v) in step_sums.iter_mut().zip(fwd.series.values(&tape)) {
                *acc += v;
            }
            batches += 1;
        }
        let test = evaluate(&model, test_set, cfg.t_train)?;
        let nb = batches as f64;
        rows.push(MetricsRow {
            epoch,
            train_loss: objective_sum / nb,
            per_timestep_losses: step_sums.iter().map(|s| s / nb).collect(),
            test_accuracy: *test.accuracies.last().expect("t_train >= 1"),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }

    let checkpoint = Checkpoint {
        model,
        config: run.clone(),
        rng: RngDescriptor::capture(cfg.seed, &rng),
    };
    Ok((checkpoint, rows))
}

/// Generates the run's data and trains on it.
pub fn train_run(run: &RunConfig) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let (train_set, test_set) = run.datasets()?;
    train(&train_set, &test_set, run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run(mixer: MixerKind, mode: LossMode) -> RunConfig {
        let task = TaskSpec::parity(4, 96, 3);
        RunConfig {
            task,
            train_fraction: 0.75,
            net: RnnConfig {
                vocab: 2,
                embed: 3,
                hidden: 6,
                classes: 2,
            },
            mixer,
            mixer_slots: 8,
            train: TrainConfig {
                t_train: 2,
                loss_mode: mode,
                epochs: 3,
                batch_size: 16,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let run = small_run(MixerKind::Attention, LossMode::Delta);
        let (train_set, _) = run.datasets().unwrap();
        let model = ThinkNetModel::init(&run).unwrap();
        let batch: Vec<&Example> = train_set.examples.iter().take(4).collect();
        let report = batch_gradient_check(Tape::new(), &model, &batch, &run.train, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let detached = TrainConfig {
            detach_max: true,
            ..run.train.clone()
        };
        assert!(batch_gradient_check(Tape::new(), &model, &batch, &detached, 1e-5).is_err());
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true).vars();
        assert!(BoundModel::from_vars(run.net, MixerKind::Linear, &vars[..7]).is_err());
        assert!(BoundModel::from_vars(run.net, MixerKind::Attention, &vars).is_ok());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::ADAM_DEFAULT] {
            let mut run = small_run(MixerKind::Attention, LossMode::Delta);
            run.train.learning_rate = 0.0;
            run.train.optimizer = optimizer;
            let (ckpt, _) = train_run(&run).unwrap();
            assert_eq!(ckpt.model, ThinkNetModel::init(&run).unwrap());
        }
    }

    #[test]
    fn rows_have_one_loss_per_training_timestep() {
        let run = small_run(MixerKind::Linear, LossMode::DeltaPeriodic(2));
        let (_, rows) = train_run(&run).unwrap();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.epoch, i + 1);
            assert_eq!(row.per_timestep_losses.len(), 2);
            assert!(row.train_loss.is_finite());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = small_run(MixerKind::Attention, LossMode::Delta);
        let (a, ra) = train_run(&run).unwrap();
        let (b, rb) = train_run(&run).unwrap();
        assert_eq!(a.model, b.model);
        assert!(ra.iter().zip(&rb).all(|(x, y)| x.same_numbers(y)));
    }

    #[test]
    fn final_epoch_matches_standalone_evaluation() {
        let run = small_run(MixerKind::Mean, LossMode::Final);
        let (train_set, test_set) = run.datasets().unwrap();
        let (ckpt, rows) = train(&train_set, &test_set, &run).unwrap();
        let eval = evaluate(&ckpt.model, &test_set, run.train.t_train).unwrap();
        let last = rows.last().unwrap();
        assert_eq!(
            eval.accuracies.last().unwrap().to_bits(),
            last.test_accuracy.to_bits()
        );
    }

    #[test]
    fn zero_head_predicts_at_chance() {
        let run = small_run(MixerKind::Last, LossMode::Delta);
        let mut model = ThinkNetModel::init(&run).unwrap();
        model.rnn.head_w = Tensor::zeros(model.rnn.head_w.shape());
        let (_, test) = run.datasets().unwrap();
        let eval = evaluate(&model, &test, 4).unwrap();
        let zeros = test.examples.iter().filter(|e| e.label == 0).count() as f64 / test.len() as f64;
        for acc in &eval.accuracies {
            assert_eq!(*acc, zeros);
        }
        for loss in &eval.per_timestep_losses {
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluation_horizon_can_exceed_training() {
        let run = small_run(MixerKind::Attention, LossMode::Delta);
        let model = ThinkNetModel::init(&run).unwrap();
        let (_, test) = run.datasets().unwrap();
        let eval = evaluate(&model, &test, 2 * run.train.t_train).unwrap();
        assert_eq!(eval.t_eval(), 4);
        assert_eq!(eval.per_timestep_losses.len(), 4);
    }

    #[test]
    fn linear_mixer_beyond_slots_is_rejected() {
        let run = small_run(MixerKind::Linear, LossMode::Delta);
        let model = ThinkNetModel::init(&run).unwrap();
        let (_, test) = run.datasets().unwrap();
        let err = evaluate(&model, &test, 9).unwrap_err();
        assert!(matches!(err, Error::LinearMixOverflow { slots: 8, requested: 9 }));
        assert!(err.to_string().contains("8 weight slots"));
    }

    #[test]
    fn divergence_is_reported_with_epoch() {
        let mut run = small_run(MixerKind::Attention, LossMode::Delta);
        run.train.learning_rate = 1e300;
        run.train.optimizer = OptimizerKind::Sgd;
        run.train.grad_clip = None;
        match train_run(&run) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut run = small_run(MixerKind::Attention, LossMode::Delta);
        run.train.t_train = 0;
        assert!(run.validate().is_err());
        let mut run = small_run(MixerKind::Attention, LossMode::Delta);
        run.train.batch_size = 0;
        assert!(run.validate().is_err());
        let mut run = small_run(MixerKind::Attention, LossMode::Delta);
        run.net.classes = 3;
        assert!(run.validate().is_err());
    }
}
