use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thinknet_core::selftest::FD_TOLERANCE;
use thinknet_core::{
    batch_gradient_check, default_t_max, metrics_csv, run_selftest, train, Checkpoint, EvalReport, Example, LossMode,
    MixerKind, OptimizerKind, RnnConfig, RunConfig, SelftestOptions, SweepReport, Tape, TaskKind, TaskSpec,
    ThinkNetModel, TrainConfig, TrainReport,
};

#[derive(Parser)]
#[command(name = "thinknet", version, about = "Train and probe think-again recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.txt, metrics.csv and report.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its test split at one horizon.
    Eval(EvalArgs),
    /// Evaluate checkpoints at every horizon up to --t-max.
    Sweep(SweepArgs),
    /// Run the invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "parity")]
    task: TaskKind,
    /// Sequence length.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Modulus for modsum.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Examples generated before the train/test split.
    #[arg(long, default_value_t = 4096)]
    count: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 3)]
    t_train: usize,
    /// One of last, mean, linear, attention.
    #[arg(long, default_value = "attention")]
    mixer: MixerKind,
    /// Linear mixer weight slots; defaults to 4 · t_train.
    #[arg(long)]
    mixer_slots: Option<usize>,
    /// final, delta or delta-periodic:<p>.
    #[arg(long, default_value = "delta")]
    loss: LossMode,
    /// Stop the gradient of the max term.
    #[arg(long)]
    detach_max: bool,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    embed: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    grad_clip: f64,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: Optimizer,
    /// Seeds both data generation and training.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Check the first batch's gradient against finite differences before training.
    #[arg(long)]
    selftest: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to <out>/checkpoint.txt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the checkpoint's training horizon.
    #[arg(long)]
    t_eval: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Repeat to sweep several checkpoints side by side; defaults to <out>/checkpoint.txt.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Defaults to 4 · t_train.
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run against a tape with a broken max gradient; every affected check must fail.
    #[arg(long, hide = true)]
    corrupt_max_gradient: bool,
}

impl TrainArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let task = match self.task {
            TaskKind::Parity => {
                if self.k != 2 {
                    bail!("parity has modulus 2, got --k {}", self.k);
                }
                TaskSpec::parity(self.n, self.count, self.seed)
            }
            TaskKind::Modsum => TaskSpec::modsum(self.n, self.k, self.count, self.seed),
        };
        let optimizer = match self.optimizer {
            Optimizer::Adam => OptimizerKind::ADAM_DEFAULT,
            Optimizer::Sgd => OptimizerKind::Sgd,
        };
        let run = RunConfig {
            task,
            train_fraction: self.train_fraction,
            net: RnnConfig {
                vocab: task.vocab(),
                embed: self.embed,
                hidden: self.hidden,
                classes: task.classes(),
            },
            mixer: self.mixer,
            mixer_slots: self.mixer_slots.unwrap_or_else(|| default_t_max(self.t_train)),
            train: TrainConfig {
                t_train: self.t_train,
                loss_mode: self.loss,
                detach_max: self.detach_max,
                learning_rate: self.lr,
                epochs: self.epochs,
                batch_size: self.batch,
                grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
                seed: self.seed,
                optimizer,
            },
        };
        run.validate()?;
        Ok(run)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let run = args.run_config()?;
    let (train_set, test_set) = run.datasets()?;
    if args.selftest {
        let model = ThinkNetModel::init(&run)?;
        let batch: Vec<&Example> = train_set.examples.iter().take(run.train.batch_size).collect();
        // The check always differentiates the max term; a detached max has no numeric counterpart.
        let live = TrainConfig {
            detach_max: false,
            ..run.train.clone()
        };
        let report = batch_gradient_check(Tape::new(), &model, &batch, &live, 1e-5)?;
        let ok = report.within(FD_TOLERANCE);
        println!(
            "{} batch gradient: {} coordinates, max relative error {:.3e}, {} below the noise floor {:.1e}",
            if ok { "PASS" } else { "FAIL" },
            report.coordinates,
            report.max_rel_error,
            report.below_noise(FD_TOLERANCE),
            report.noise_floor
        );
        if !ok {
            return Ok(ExitCode::FAILURE);
        }
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let (checkpoint, rows) = train(&train_set, &test_set, &run)?;
    checkpoint.save(args.out.join("checkpoint.txt"))?;
    write(&args.out.join("metrics.csv"), &metrics_csv(run.train.loss_mode, run.train.t_train, &rows)?)?;
    let report = TrainReport::new(&checkpoint, &rows);
    write(&args.out.join("report.json"), &report.to_json()?)?;
    let acc = report.final_test_accuracy().unwrap_or(f64::NAN);
    println!("{}: final test accuracy {acc:.4} at T={}", checkpoint.id(), run.train.t_train);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let path = args.checkpoint.unwrap_or_else(|| args.out.join("checkpoint.txt"));
    let checkpoint = load(&path)?;
    let t_eval = args.t_eval.unwrap_or(checkpoint.config.train.t_train);
    let (_, test) = checkpoint.config.datasets()?;
    let evaluation = checkpoint.evaluate(&test, t_eval)?;
    println!("t_eval,mean_loss,accuracy");
    for (t, (l, a)) in evaluation.per_timestep_losses.iter().zip(&evaluation.accuracies).enumerate() {
        println!("{},{l:.6},{a:.4}", t + 1);
    }
    fs::create_dir_all(&args.out)?;
    write(&args.out.join("eval_report.json"), &EvalReport::new(&checkpoint, &evaluation).to_json()?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let paths = if args.checkpoint.is_empty() {
        vec![args.out.join("checkpoint.txt")]
    } else {
        args.checkpoint
    };
    let checkpoints = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let report = SweepReport::build(&checkpoints, args.t_max)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&args.out)?;
    write(&args.out.join("sweep.csv"), &report.to_csv())?;
    write(&args.out.join("paired.csv"), &report.paired_csv())?;
    write(&args.out.join("sweep_report.json"), &report.to_json()?)?;
    print!("{}", report.paired_csv());
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest(args: SelftestArgs) -> ExitCode {
    let report = run_selftest(SelftestOptions {
        corrupt_max_gradient: args.corrupt_max_gradient,
        seed: args.seed,
    });
    for r in &report.results {
        println!("{r}");
    }
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("selftest: {} invariants passed", report.results.len());
        ExitCode::SUCCESS
    } else {
        println!("selftest: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn main() -> ExitCode {
    let outcome = match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Selftest(args) => Ok(cmd_selftest(args)),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
