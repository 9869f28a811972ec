//! Textual checkpoints: one JSON document holding the run configuration, the
//! shuffling generator's position and every parameter tensor. Reals are
//! written with 17 significant digits so a load restores them bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, Evaluation, RunConfig, ThinkNetModel};
use crate::error::{Error, Result};
use crate::fmt_real;
use crate::tasks::Dataset;
use crate::tensor::Tensor;

const FORMAT: &str = "thinknet-checkpoint";
const VERSION: u32 = 1;

/// Where the shuffling generator stopped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngDescriptor {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    /// Word position within the stream, as a decimal string.
    pub word_pos: String,
}

impl RngDescriptor {
    pub(crate) fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            algorithm: "chacha8".into(),
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ThinkNetModel,
    pub config: RunConfig,
    pub rng: RngDescriptor,
}

#[derive(Deserialize)]
struct ParamDoc {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    config: RunConfig,
    rng: RngDescriptor,
    params: Vec<ParamDoc>,
}

impl Checkpoint {
    pub fn id(&self) -> String {
        self.config.id()
    }

    pub fn evaluate(&self, dataset: &Dataset, t_eval: usize) -> Result<Evaluation> {
        evaluate(&self.model, dataset, t_eval)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str("{\n");
        writeln!(out, "  \"format\": \"{FORMAT}\",").unwrap();
        writeln!(out, "  \"version\": {VERSION},").unwrap();
        writeln!(out, "  \"config\": {},", serde_json::to_string(&self.config)?).unwrap();
        writeln!(out, "  \"rng\": {},", serde_json::to_string(&self.rng)?).unwrap();
        out.push_str("  \"params\": [\n");
        let params = self.model.named_tensors();
        for (i, (name, tensor)) in params.iter().enumerate() {
            let shape: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
            let data: Vec<String> = tensor.data().iter().map(|&x| fmt_real(x)).collect();
            write!(
                out,
                "    {{\"name\": \"{name}\", \"shape\": [{}], \"data\": [{}]}}",
                shape.join(", "),
                data.join(", ")
            )
            .unwrap();
            out.push_str(if i + 1 < params.len() { ",\n" } else { "\n" });
        }
        out.push_str("  ]\n}\n");
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        doc.config.validate()?;
        let mut model = ThinkNetModel::init(&doc.config)?;
        let expected: Vec<(&'static str, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if doc.params.len() != expected.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} parameters, configuration needs {}",
                doc.params.len(),
                expected.len()
            )));
        }
        for ((slot, (name, shape)), param) in
            model.tensors_mut().into_iter().zip(&expected).zip(doc.params)
        {
            if param.name != *name || param.shape != *shape {
                return Err(Error::Parse(format!(
                    "expected parameter {name} {shape:?}, found {} {:?}",
                    param.name, param.shape
                )));
            }
            let tensor = Tensor::new(param.shape, param.data)?;
            if !tensor.is_finite() {
                return Err(Error::Parse(format!("parameter {name} has non-finite values")));
            }
            *slot = tensor;
        }
        Ok(Self {
            model,
            config: doc.config,
            rng: doc.rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltaloss::LossMode;
    use crate::statefn::RnnConfig;
    use crate::tasks::TaskSpec;
    use crate::thinknet::MixerKind;
    use crate::trainer::{train_run, TrainConfig};

    fn run(mixer: MixerKind) -> RunConfig {
        RunConfig {
            task: TaskSpec::modsum(3, 3, 60, 5),
            train_fraction: 0.5,
            net: RnnConfig {
                vocab: 3,
                embed: 2,
                hidden: 4,
                classes: 3,
            },
            mixer,
            mixer_slots: 6,
            train: TrainConfig {
                t_train: 2,
                loss_mode: LossMode::DeltaPeriodic(2),
                epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for mixer in MixerKind::ALL {
            let cfg = run(mixer);
            let (ckpt, _) = train_run(&cfg).unwrap();
            let text = ckpt.to_text().unwrap();
            let back = Checkpoint::from_text(&text).unwrap();
            for ((n1, a), (n2, b)) in ckpt.model.named_tensors().iter().zip(back.model.named_tensors()) {
                assert_eq!(*n1, n2);
                assert!(a.bits_eq(b), "{n1} changed");
            }
            assert_eq!(back.config, ckpt.config);
            assert_eq!(back.rng, ckpt.rng);
            assert_eq!(back.to_text().unwrap(), text);

            let (_, test) = cfg.datasets().unwrap();
            let before = ckpt.evaluate(&test, 5).unwrap();
            let after = back.evaluate(&test, 5).unwrap();
            assert!(before.bits_eq(&after));
        }
    }

    #[test]
    fn file_round_trip() {
        let (ckpt, _) = train_run(&run(MixerKind::Attention)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.txt");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_tampered_documents() {
        let (ckpt, _) = train_run(&run(MixerKind::Linear)).unwrap();
        let text = ckpt.to_text().unwrap();
        assert!(Checkpoint::from_text(&text.replace("\"w_rec\"", "\"w_rek\"")).is_err());
        assert!(Checkpoint::from_text(&text.replace("thinknet-checkpoint", "other")).is_err());
        assert!(Checkpoint::from_text("{}").is_err());
    }
}
