//! Think-again networks: a state-dependent step function `F(x, s)` run for
//! several passes over the same input, where a mixing function turns all
//! previous pass outputs into the next starting state. Training can target
//! the last pass only, or the delta objective that rewards improving the
//! loss at every pass.
//!
//! Everything runs on a small define-by-run reverse-mode tape in `f64`.

pub mod autodiff;
pub mod deltaloss;
pub mod error;
pub mod experiments;
pub mod selftest;
pub mod statefn;
pub mod tasks;
pub mod tensor;
pub mod thinknet;
pub mod trainer;

pub use autodiff::{finite_diff_check, finite_diff_check_on, Activation, GradCheckReport, GradientMap, Reduction, Tape, Var};
pub use deltaloss::{
    apply_mode, delta_loss, delta_loss_naive, final_loss, loss_gradient_profile, periodic_delta_loss,
    LossMode, LossSeries,
};
pub use error::{Error, Result};
pub use experiments::{
    default_t_max, metrics_csv, parse_metrics_csv, parse_paired_csv, parse_sweep_csv, sweep_curve, train_many,
    EvalReport, MetricsRecord, SweepCurve, SweepReport, SweepRow, TrainReport,
};
pub use selftest::{run_selftest, InvariantResult, SelftestOptions, SelftestReport};
pub use statefn::{init_params, loss_of, rnn_apply, Input, RnnConfig, RnnParams, SequenceBatch, State, StateFn, StepOutput};
pub use tasks::{generate_modsum, generate_parity, split, Dataset, Example, TaskKind, TaskSpec};
pub use tensor::Tensor;
pub use thinknet::{mix, tn_run, BoundMixer, MixerKind, MixingFunction, ThinkNetConfig, ThinkNetTrace};
pub use trainer::{
    batch_gradient_check, evaluate, forward_batch, train, train_run, BoundModel, Checkpoint, Evaluation, MetricsRow, OptimizerKind, RunConfig,
    ThinkNetModel, TrainConfig,
};

/// Formats a real with 17 significant digits, enough to restore the exact
/// `f64` on parse.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}
