use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("{0} requires a non-empty input")]
    Empty(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("label {label} is outside the {classes} available classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("a think-again run needs at least one timestep")]
    ZeroTimesteps,

    #[error("linear mixer has {slots} weight slots but received {requested} previous outputs")]
    LinearMixOverflow { slots: usize, requested: usize },

    #[error("period must be at least 1, got {0}")]
    InvalidPeriod(usize),

    #[error("objective is not deterministic: baseline evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("split of {count} examples at fraction {fraction} leaves a side empty")]
    DegenerateSplit { count: usize, fraction: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
