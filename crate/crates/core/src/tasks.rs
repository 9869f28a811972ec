//! Synthetic sequence-classification tasks with exactly computable labels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::statefn::Input;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// XOR of a bit string.
    Parity,
    /// Sum of tokens modulo `k`.
    Modsum,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::Modsum => "modsum",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity" => Ok(TaskKind::Parity),
            "modsum" => Ok(TaskKind::Modsum),
            _ => Err(Error::Parse(format!("unknown task `{s}`; expected parity or modsum"))),
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Sequence length.
    pub n: usize,
    /// Modulus; always 2 for parity.
    pub k: usize,
    pub count: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn parity(n: usize, count: usize, seed: u64) -> Self {
        Self {
            task: TaskKind::Parity,
            n,
            k: 2,
            count,
            seed,
        }
    }

    pub fn modsum(n: usize, k: usize, count: usize, seed: u64) -> Self {
        Self {
            task: TaskKind::Modsum,
            n,
            k,
            count,
            seed,
        }
    }

    pub fn vocab(&self) -> usize {
        self.k
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn generate(&self) -> Result<Dataset> {
        match self.task {
            TaskKind::Parity => generate_parity(self.n, self.count, self.seed),
            TaskKind::Modsum => generate_modsum(self.n, self.k, self.count, self.seed),
        }
    }

    /// The defining label function.
    pub fn label_of(&self, tokens: &[usize]) -> usize {
        tokens.iter().sum::<usize>() % self.k
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Input,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub spec: TaskSpec,
    pub split: Split,
    /// Index of the first example within the generation stream.
    pub offset: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Count of examples whose stored label disagrees with the task's label
    /// function.
    pub fn label_mismatches(&self) -> usize {
        self.examples
            .iter()
            .filter(|e| self.spec.label_of(e.input.tokens()) != e.label)
            .count()
    }
}

fn generate(spec: TaskSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(Error::Config("sequence length must be at least 1".into()));
    }
    if spec.k < 2 {
        return Err(Error::Config(format!("modulus must be at least 2, got {}", spec.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let examples = (0..spec.count)
        .map(|_| {
            let tokens: Vec<usize> = (0..spec.n).map(|_| rng.gen_range(0..spec.k)).collect();
            let label = spec.label_of(&tokens);
            Ok(Example {
                input: Input::new(tokens)?,
                label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        examples,
        spec,
        split: Split::Full,
        offset: 0,
    })
}

/// Uniform random bit strings labelled by their XOR.
pub fn generate_parity(n: usize, count: usize, seed: u64) -> Result<Dataset> {
    generate(TaskSpec::parity(n, count, seed))
}

/// Tokens uniform in `[0, k)` labelled by their sum modulo `k`.
pub fn generate_modsum(n: usize, k: usize, count: usize, seed: u64) -> Result<Dataset> {
    generate(TaskSpec::modsum(n, k, count, seed))
}

/// Sends the first `⌈fraction · count⌉` examples to train and the rest to test.
pub fn split(dataset: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    let count = dataset.len();
    let degenerate = || Error::DegenerateSplit {
        count,
        fraction: train_fraction,
    };
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(degenerate());
    }
    let cut = (train_fraction * count as f64).ceil() as usize;
    if cut == 0 || cut >= count {
        return Err(degenerate());
    }
    let part = |range: std::ops::Range<usize>, split| Dataset {
        offset: dataset.offset + range.start,
        examples: dataset.examples[range].to_vec(),
        spec: dataset.spec,
        split,
    };
    Ok((part(0..cut, Split::Train), part(cut..count, Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_labels() {
        let spec = TaskSpec::parity(3, 0, 0);
        assert_eq!(spec.label_of(&[1, 0, 1]), 0);
        assert_eq!(spec.label_of(&[1, 0, 0]), 1);
    }

    #[test]
    fn modsum_labels() {
        let spec = TaskSpec::modsum(2, 4, 0, 0);
        assert_eq!(spec.label_of(&[2, 3]), 1);
        assert_eq!(spec.label_of(&[0, 0]), 0);
    }

    #[test]
    fn modsum_with_two_classes_is_parity() {
        let a = generate_parity(6, 50, 21).unwrap();
        let b = generate_modsum(6, 2, 50, 21).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let a = generate_modsum(5, 3, 200, 7).unwrap();
        let b = generate_modsum(5, 3, 200, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.label_mismatches(), 0);
        assert!(a.examples.iter().all(|e| e.input.tokens().iter().all(|&t| t < 3)));
        assert_ne!(a.examples, generate_modsum(5, 3, 200, 8).unwrap().examples);
    }

    #[test]
    fn parity_is_balanced() {
        for seed in [1, 2, 3] {
            let d = generate_parity(8, 4096, seed).unwrap();
            let ones = d.examples.iter().filter(|e| e.label == 1).count();
            let freq = ones as f64 / d.len() as f64;
            assert!((freq - 0.5).abs() < 0.05, "seed {seed}: {freq}");
        }
    }

    #[test]
    fn split_sizes_and_boundaries() {
        let d = generate_parity(4, 100, 1).unwrap();
        let (train, test) = split(&d, 0.8).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(test.offset, 80);
        assert_eq!(split(&d, 0.8).unwrap(), (train, test));

        let small = generate_parity(4, 10, 1).unwrap();
        assert!(matches!(split(&small, 0.95), Err(Error::DegenerateSplit { .. })));
        assert!(split(&small, 0.0).is_err());
        assert!(split(&small, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_parity(0, 10, 1).is_err());
        assert!(generate_modsum(3, 1, 10, 1).is_err());
        assert!("mnist".parse::<TaskKind>().is_err());
    }
}
