//! Experiment plumbing: metrics and sweep tables, extrapolation reports that
//! put several checkpoints side by side, and a runner for independent runs.
//!
//! Every real written to CSV uses [`fmt_real`], so tables parse back to the
//! identical `f64`. JSON reports embed the full [`RunConfig`] of each run.

use std::fmt::Write as _;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::deltaloss::LossMode;
use crate::error::{Error, Result};
use crate::fmt_real;
use crate::tasks::TaskSpec;
use crate::trainer::{train_run, Checkpoint, Evaluation, MetricsRow, RunConfig};

const TRAIN_REPORT: &str = "thinknet-train-report";
const EVAL_REPORT: &str = "thinknet-eval-report";
const SWEEP_REPORT: &str = "thinknet-sweep-report";
const REPORT_VERSION: u32 = 1;

/// Default sweep horizon for a model trained with `t_train` passes.
pub fn default_t_max(t_train: usize) -> usize {
    4 * t_train
}

fn parse_field<T: FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {what} {field:?}")))
}

fn ratio_text(r: Option<f64>) -> String {
    r.map(fmt_real).unwrap_or_default()
}

fn parse_ratio(field: &str, line: usize) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_field(field, "ratio", line).map(Some)
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(with = "mode_string")]
    pub mode: LossMode,
    pub t_train: usize,
    pub losses: Vec<f64>,
    pub test_acc: f64,
    pub seconds: f64,
}

impl MetricsRecord {
    pub fn from_row(mode: LossMode, row: &MetricsRow) -> Self {
        Self {
            epoch: row.epoch,
            mode,
            t_train: row.per_timestep_losses.len(),
            losses: row.per_timestep_losses.clone(),
            test_acc: row.test_accuracy,
            seconds: row.wall_seconds,
        }
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.mode == other.mode
            && self.t_train == other.t_train
            && self.test_acc.to_bits() == other.test_acc.to_bits()
            && self.seconds.to_bits() == other.seconds.to_bits()
            && self.losses.len() == other.losses.len()
            && self.losses.iter().zip(&other.losses).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

mod mode_string {
    use crate::deltaloss::LossMode;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(mode: &LossMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&mode.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LossMode, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

pub fn metrics_header(t_train: usize) -> String {
    let mut header = String::from("epoch,mode,t_train");
    for t in 1..=t_train {
        write!(header, ",loss_t{t}").unwrap();
    }
    header.push_str(",test_acc,seconds");
    header
}

/// Renders training metrics with header `epoch,mode,t_train,loss_t1,...,loss_tT,test_acc,seconds`.
pub fn metrics_csv(mode: LossMode, t_train: usize, rows: &[MetricsRow]) -> Result<String> {
    let mut out = metrics_header(t_train);
    out.push('\n');
    for row in rows {
        if row.per_timestep_losses.len() != t_train {
            return Err(Error::Config(format!(
                "epoch {} has {} losses, expected {t_train}",
                row.epoch,
                row.per_timestep_losses.len()
            )));
        }
        write!(out, "{},{mode},{t_train}", row.epoch).unwrap();
        for &l in &row.per_timestep_losses {
            write!(out, ",{}", fmt_real(l)).unwrap();
        }
        writeln!(out, ",{},{}", fmt_real(row.test_accuracy), fmt_real(row.wall_seconds)).unwrap();
    }
    Ok(out)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Empty("metrics table"))?;
    let columns = header.split(',').count();
    if columns < 6 {
        return Err(Error::Parse(format!("metrics header too short: {header:?}")));
    }
    let t_train = columns - 5;
    if header != metrics_header(t_train) {
        return Err(Error::Parse(format!("unexpected metrics header {header:?}")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let n = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(Error::Parse(format!("line {n}: {} fields, expected {columns}", fields.len())));
        }
        let mode: LossMode = fields[1].parse()?;
        let record_t: usize = parse_field(fields[2], "t_train", n)?;
        if record_t != t_train {
            return Err(Error::Parse(format!("line {n}: t_train {record_t} but header has {t_train} losses")));
        }
        let losses = fields[3..3 + t_train]
            .iter()
            .map(|f| parse_field(f, "loss", n))
            .collect::<Result<Vec<f64>>>()?;
        records.push(MetricsRecord {
            epoch: parse_field(fields[0], "epoch", n)?,
            mode,
            t_train,
            losses,
            test_acc: parse_field(fields[3 + t_train], "test_acc", n)?,
            seconds: parse_field(fields[4 + t_train], "seconds", n)?,
        });
    }
    Ok(records)
}

/// Summary written next to a trained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub format: String,
    pub version: u32,
    pub checkpoint_id: String,
    pub config: RunConfig,
    pub parameter_count: usize,
    pub metrics: Vec<MetricsRecord>,
}

impl TrainReport {
    pub fn new(checkpoint: &Checkpoint, rows: &[MetricsRow]) -> Self {
        let mode = checkpoint.config.train.loss_mode;
        Self {
            format: TRAIN_REPORT.into(),
            version: REPORT_VERSION,
            checkpoint_id: checkpoint.id(),
            config: checkpoint.config.clone(),
            parameter_count: checkpoint.model.count_parameters(),
            metrics: rows.iter().map(|r| MetricsRecord::from_row(mode, r)).collect(),
        }
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.test_acc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        check_format(&report.format, report.version, TRAIN_REPORT)?;
        Ok(report)
    }
}

fn check_format(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected || version != REPORT_VERSION {
        return Err(Error::Parse(format!(
            "expected {expected} v{REPORT_VERSION}, found {format} v{version}"
        )));
    }
    Ok(())
}

/// Result of evaluating one checkpoint at one horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub checkpoint_id: String,
    pub config: RunConfig,
    pub t_eval: usize,
    pub per_timestep_losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn new(checkpoint: &Checkpoint, evaluation: &Evaluation) -> Self {
        Self {
            format: EVAL_REPORT.into(),
            version: REPORT_VERSION,
            checkpoint_id: checkpoint.id(),
            config: checkpoint.config.clone(),
            t_eval: evaluation.t_eval(),
            per_timestep_losses: evaluation.per_timestep_losses.clone(),
            accuracies: evaluation.accuracies.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        check_format(&report.format, report.version, EVAL_REPORT)?;
        Ok(report)
    }
}

/// One evaluated horizon of one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub checkpoint_id: String,
    #[serde(with = "mode_string")]
    pub loss_mode: LossMode,
    pub t_train: usize,
    pub t_eval: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    /// `L(t_eval) / L(t_train)`; absent when the reference loss is zero.
    pub ratio: Option<f64>,
}

impl SweepRow {
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.checkpoint_id == other.checkpoint_id
            && self.loss_mode == other.loss_mode
            && self.t_train == other.t_train
            && self.t_eval == other.t_eval
            && self.mean_loss.to_bits() == other.mean_loss.to_bits()
            && self.accuracy.to_bits() == other.accuracy.to_bits()
            && self.ratio.map(f64::to_bits) == other.ratio.map(f64::to_bits)
    }
}

/// The sweep of a single checkpoint over `t_eval = 1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub checkpoint_id: String,
    pub config: RunConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepCurve {
    pub fn loss_mode(&self) -> LossMode {
        self.config.train.loss_mode
    }

    pub fn t_train(&self) -> usize {
        self.config.train.t_train
    }

    pub fn row(&self, t_eval: usize) -> Option<&SweepRow> {
        self.rows.get(t_eval.checked_sub(1)?)
    }

    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.ratio).collect()
    }

    /// Horizons a periodic-max checkpoint should not be read at.
    pub fn off_period(&self) -> Vec<usize> {
        match self.loss_mode() {
            LossMode::DeltaPeriodic(p) if p > 1 => {
                self.rows.iter().map(|r| r.t_eval).filter(|t| t % p != 0).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Sweeps one checkpoint. A single evaluation at `t_max` yields every
/// shorter horizon because the pass at `t` never sees later passes.
pub fn sweep_curve(checkpoint: &Checkpoint, t_max: usize) -> Result<SweepCurve> {
    let (_, test) = checkpoint.config.datasets()?;
    let t_train = checkpoint.config.train.t_train;
    if t_max < t_train {
        return Err(Error::Config(format!(
            "sweep horizon {t_max} is shorter than the training horizon {t_train}"
        )));
    }
    let evaluation = checkpoint.evaluate(&test, t_max)?;
    let reference = evaluation.per_timestep_losses[t_train - 1];
    let id = checkpoint.id();
    let rows = evaluation
        .per_timestep_losses
        .iter()
        .zip(&evaluation.accuracies)
        .enumerate()
        .map(|(i, (&loss, &accuracy))| {
            let ratio = loss / reference;
            SweepRow {
                checkpoint_id: id.clone(),
                loss_mode: checkpoint.config.train.loss_mode,
                t_train,
                t_eval: i + 1,
                mean_loss: loss,
                accuracy,
                ratio: ratio.is_finite().then_some(ratio),
            }
        })
        .collect();
    Ok(SweepCurve {
        checkpoint_id: id,
        config: checkpoint.config.clone(),
        rows,
    })
}

/// Sweeps of one or more checkpoints trained on the same task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format: String,
    pub version: u32,
    pub task: TaskSpec,
    pub t_max: usize,
    pub curves: Vec<SweepCurve>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    /// Sweeps each checkpoint to `t_max`, or to four times the longest
    /// training horizon when not given.
    pub fn build(checkpoints: &[Checkpoint], t_max: Option<usize>) -> Result<Self> {
        let first = checkpoints.first().ok_or(Error::Empty("sweep checkpoints"))?;
        let task = first.config.task;
        if let Some(other) = checkpoints.iter().find(|c| c.config.task != task) {
            return Err(Error::Config(format!(
                "paired sweep needs one task, got {:?} and {:?}",
                task, other.config.task
            )));
        }
        let longest = checkpoints.iter().map(|c| c.config.train.t_train).max().unwrap_or(1);
        let t_max = t_max.unwrap_or_else(|| default_t_max(longest));
        let curves = checkpoints
            .iter()
            .map(|c| sweep_curve(c, t_max))
            .collect::<Result<Vec<_>>>()?;
        let warnings = curves
            .iter()
            .filter_map(|c| {
                let off = c.off_period();
                (!off.is_empty()).then(|| {
                    let list: Vec<String> = off.iter().map(|t| t.to_string()).collect();
                    format!(
                        "{} was trained with {}; t_eval {} are not multiples of the period",
                        c.checkpoint_id,
                        c.loss_mode(),
                        list.join(" ")
                    )
                })
            })
            .collect();
        Ok(Self {
            format: SWEEP_REPORT.into(),
            version: REPORT_VERSION,
            task,
            t_max,
            curves,
            warnings,
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = &SweepRow> {
        self.curves.iter().flat_map(|c| &c.rows)
    }

    /// Long format, one line per (checkpoint, t_eval).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,mode,t_train,t_eval,mean_loss,accuracy,ratio\n");
        for r in self.rows() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.checkpoint_id,
                r.loss_mode,
                r.t_train,
                r.t_eval,
                fmt_real(r.mean_loss),
                fmt_real(r.accuracy),
                ratio_text(r.ratio)
            )
            .unwrap();
        }
        out
    }

    /// Wide format: one line per `t_eval` with `r(t)` of every checkpoint
    /// side by side.
    pub fn paired_csv(&self) -> String {
        let mut out = String::from("t_eval");
        for c in &self.curves {
            write!(out, ",r[{}]", c.checkpoint_id).unwrap();
        }
        out.push('\n');
        for t in 1..=self.t_max {
            write!(out, "{t}").unwrap();
            for c in &self.curves {
                write!(out, ",{}", ratio_text(c.row(t).and_then(|r| r.ratio))).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        check_format(&report.format, report.version, SWEEP_REPORT)?;
        Ok(report)
    }
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("checkpoint,mode,t_train,t_eval,mean_loss,accuracy,ratio") => {}
        other => return Err(Error::Parse(format!("unexpected sweep header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let n = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse(format!("line {n}: {} fields, expected 7", fields.len())));
        }
        rows.push(SweepRow {
            checkpoint_id: fields[0].to_string(),
            loss_mode: fields[1].parse()?,
            t_train: parse_field(fields[2], "t_train", n)?,
            t_eval: parse_field(fields[3], "t_eval", n)?,
            mean_loss: parse_field(fields[4], "mean_loss", n)?,
            accuracy: parse_field(fields[5], "accuracy", n)?,
            ratio: parse_ratio(fields[6], n)?,
        });
    }
    Ok(rows)
}

/// Parses [`SweepReport::paired_csv`] into the checkpoint ids and one row of
/// ratios per `t_eval`.
pub fn parse_paired_csv(text: &str) -> Result<(Vec<String>, Vec<(usize, Vec<Option<f64>>)>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Empty("paired table"))?;
    let mut columns = header.split(',');
    if columns.next() != Some("t_eval") {
        return Err(Error::Parse(format!("unexpected paired header {header:?}")));
    }
    let ids = columns
        .map(|c| {
            c.strip_prefix("r[")
                .and_then(|c| c.strip_suffix(']'))
                .map(str::to_string)
                .ok_or_else(|| Error::Parse(format!("bad paired column {c:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let n = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ids.len() + 1 {
            return Err(Error::Parse(format!("line {n}: {} fields, expected {}", fields.len(), ids.len() + 1)));
        }
        let ratios = fields[1..].iter().map(|f| parse_ratio(f, n)).collect::<Result<Vec<_>>>()?;
        rows.push((parse_field(fields[0], "t_eval", n)?, ratios));
    }
    Ok((ids, rows))
}

/// Trains independent runs, at most one per available core, and returns the
/// results in input order.
pub fn train_many(runs: &[RunConfig]) -> Vec<Result<(Checkpoint, Vec<MetricsRow>)>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(runs.len().max(1));
    if workers <= 1 {
        return runs.iter().map(train_run).collect();
    }
    let mut results: Vec<Option<Result<(Checkpoint, Vec<MetricsRow>)>>> = (0..runs.len()).map(|_| None).collect();
    for (chunk_runs, chunk_out) in runs.chunks(workers).zip(results.chunks_mut(workers)) {
        thread::scope(|s| {
            let handles: Vec<_> = chunk_runs.iter().map(|r| s.spawn(move || train_run(r))).collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("training thread panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every run joined")).collect()
}
