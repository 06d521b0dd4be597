//! The iterative prune/recover loop, the direct-pruning baseline, and the
//! comparison report between the two.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::eval::{EvalSuite, MetricSuite};
use crate::model::{save_checkpoint, TransformerModel};
use crate::pruning::{score_blocks, CalibrationSet, ImportanceReport};
use crate::recovery::{recover, RecoveryConfig, RecoveryLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prune,
    Recover,
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::Prune => "pruned",
            Phase::Recover => "recovered",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub steps: usize,
    pub tokens: usize,
    pub initial_total: f64,
    pub final_total: f64,
    pub mean_total: f64,
}

impl LossSummary {
    fn from_log(log: &RecoveryLog) -> Option<Self> {
        Some(Self {
            steps: log.steps.len(),
            tokens: log.tokens_seen,
            initial_total: log.initial_total()?,
            final_total: log.final_total()?,
            mean_total: log.mean_total()?,
        })
    }
}

/// One line of the JSONL run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    /// 1-based iteration number.
    pub iter: usize,
    pub phase: Phase,
    pub dropped_origin_index: usize,
    /// Block scores of the pruning decision (prune entries only).
    pub scores: Vec<f64>,
    /// Distillation loss trajectory (recover entries only).
    pub loss_summary: Option<LossSummary>,
    pub metrics: MetricSuite,
    /// Block count after this phase.
    pub n_layers: usize,
    pub seconds: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopCriterion {
    pub target_layers: Option<usize>,
    pub max_iterations: Option<usize>,
}

impl StopCriterion {
    pub fn target(k: usize) -> Self {
        Self {
            target_layers: Some(k),
            max_iterations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.target_layers.is_some() || self.max_iterations.is_some(),
            "stop criterion needs target_layers or max_iterations"
        );
        if let Some(k) = self.target_layers {
            ensure!(k >= 1, "target_layers must be at least 1");
        }
        if let Some(n) = self.max_iterations {
            ensure!(n >= 1, "max_iterations must be at least 1");
        }
        Ok(())
    }

    fn done(&self, layers: usize, iterations: usize) -> bool {
        self.target_layers.is_some_and(|k| layers <= k) || self.max_iterations.is_some_and(|n| iterations >= n)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    #[default]
    All,
    LastOnly,
}

/// Where per-iteration artifacts go.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub retention: Retention,
    /// Run log file name inside `dir`.
    pub log_name: String,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            retention: Retention::All,
            log_name: "run_log.jsonl".into(),
        }
    }

    pub fn checkpoint_path(&self, iter: usize, phase: Phase) -> PathBuf {
        self.dir.join(format!("iter{iter}_{}.itrb", phase.tag()))
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(&self.log_name)
    }
}

/// Appends log lines, flushing each one.
struct LogWriter {
    file: Option<(File, PathBuf)>,
}

impl LogWriter {
    fn open(out: Option<&RunOutput>) -> Result<Self> {
        let Some(out) = out else { return Ok(Self { file: None }) };
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        let path = out.log_path();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: Some((file, path)) })
    }

    fn push(&mut self, entry: &IterationLog) -> Result<()> {
        if let Some((f, path)) = &mut self.file {
            let line = serde_json::to_string(entry)?;
            writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// How the calibration set is chosen for each iteration.
pub enum Calibration<'a> {
    /// One sample reused by every iteration.
    Fixed(&'a CalibrationSet),
    /// A fresh sample per iteration, from the 1-based iteration number.
    PerIteration(&'a dyn Fn(usize) -> Result<CalibrationSet>),
}

impl Calibration<'_> {
    fn get(&self, iter: usize) -> Result<CalibrationSet> {
        match self {
            Calibration::Fixed(c) => Ok((*c).clone()),
            Calibration::PerIteration(f) => f(iter),
        }
    }
}

/// Everything [`iterate`] needs besides the model.
pub struct IterateSettings<'a> {
    pub calibration: Calibration<'a>,
    pub recovery_data: &'a [u32],
    pub recovery: RecoveryConfig,
    /// `false` skips recovery entirely (prune entries only).
    pub recovery_enabled: bool,
    pub stop: StopCriterion,
    pub eval: &'a EvalSuite,
    pub output: Option<RunOutput>,
    pub seed: u64,
}

/// Seed of the recovery pass in iteration `iter`.
pub fn recovery_seed(base: u64, iter: usize) -> u64 {
    base.wrapping_add(iter as u64 - 1)
}

fn remove_checkpoints(out: &RunOutput, iter: usize) -> Result<()> {
    for phase in [Phase::Prune, Phase::Recover] {
        let p = out.checkpoint_path(iter, phase);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn record(
    out: Option<&RunOutput>,
    log: &mut LogWriter,
    model: &TransformerModel,
    entry: &IterationLog,
) -> Result<()> {
    if let Some(out) = out {
        save_checkpoint(model, out.checkpoint_path(entry.iter, entry.phase))?;
    }
    log.push(entry)
}

/// Alternates pruning one block and recovering against `teacher` until the
/// stop criterion holds. The teacher is always the unpruned model passed in.
pub fn iterate(teacher: &TransformerModel, s: &IterateSettings) -> Result<(TransformerModel, Vec<IterationLog>)> {
    s.stop.validate()?;
    if let Some(k) = s.stop.target_layers {
        ensure!(
            teacher.n_layers() > k,
            "iterate: model has {} blocks, target is {k}",
            teacher.n_layers()
        );
    }
    ensure!(
        teacher.drop_history().is_empty(),
        "iterate: the teacher must be an unpruned model"
    );
    if s.recovery_enabled {
        s.recovery.validate()?;
    }
    let out = s.output.as_ref();
    let mut writer = LogWriter::open(out)?;
    let mut logs = Vec::new();
    let mut current = teacher.clone();
    let mut iter = 0;

    while !s.stop.done(current.n_layers(), iter) {
        ensure!(current.n_layers() >= 2, "iterate: cannot prune below one block");
        iter += 1;
        let calib = s.calibration.get(iter)?;

        let t0 = Instant::now();
        let report = score_blocks(&current, &calib)?;
        let pruned = current.remove_block(report.chosen)?;
        let metrics = s.eval.evaluate(&pruned)?;
        let entry = IterationLog {
            iter,
            phase: Phase::Prune,
            dropped_origin_index: report.chosen_origin,
            scores: report.scores.clone(),
            loss_summary: None,
            metrics,
            n_layers: pruned.n_layers(),
            seconds: t0.elapsed().as_secs_f64(),
            seed: s.seed,
        };
        record(out, &mut writer, &pruned, &entry)?;
        logs.push(entry);
        current = pruned;

        if s.recovery_enabled {
            let t0 = Instant::now();
            let cfg = RecoveryConfig {
                seed: recovery_seed(s.recovery.seed, iter),
                ..s.recovery.clone()
            };
            let (recovered, rlog) = recover(teacher, &current, s.recovery_data, &cfg)?;
            let metrics = s.eval.evaluate(&recovered)?;
            let entry = IterationLog {
                iter,
                phase: Phase::Recover,
                dropped_origin_index: report.chosen_origin,
                scores: Vec::new(),
                loss_summary: LossSummary::from_log(&rlog),
                metrics,
                n_layers: recovered.n_layers(),
                seconds: t0.elapsed().as_secs_f64(),
                seed: cfg.seed,
            };
            record(out, &mut writer, &recovered, &entry)?;
            logs.push(entry);
            current = recovered;
        }

        if let Some(out) = out {
            if out.retention == Retention::LastOnly && iter > 1 {
                remove_checkpoints(out, iter - 1)?;
            }
        }
    }
    Ok((current, logs))
}

/// Removes `n_drops` blocks one after another, re-scoring after each
/// removal, with no recovery in between.
///
/// At least two blocks must remain.
pub fn direct_prune(
    model: &TransformerModel,
    calib: &CalibrationSet,
    n_drops: usize,
) -> Result<(TransformerModel, Vec<ImportanceReport>)> {
    ensure!(n_drops >= 1, "direct_prune: n_drops must be at least 1");
    ensure!(
        n_drops + 1 < model.n_layers(),
        "direct_prune: dropping {n_drops} of {} blocks leaves fewer than 2",
        model.n_layers()
    );
    let mut current = model.clone();
    let mut reports = Vec::with_capacity(n_drops);
    for _ in 0..n_drops {
        let report = score_blocks(&current, calib)?;
        current = current.remove_block(report.chosen)?;
        reports.push(report);
    }
    Ok((current, reports))
}

/// Direct pruning to `target_layers` followed by a single recovery pass.
///
/// Logs one prune entry per removal (iteration numbers count removals) and
/// one recover entry tagged with the last removal.
pub fn direct_arm(
    teacher: &TransformerModel,
    calib: &CalibrationSet,
    target_layers: usize,
    s: &IterateSettings,
) -> Result<(TransformerModel, Vec<IterationLog>)> {
    ensure!(
        teacher.n_layers() > target_layers,
        "direct: model has {} blocks, target is {target_layers}",
        teacher.n_layers()
    );
    let out = s.output.as_ref();
    let mut writer = LogWriter::open(out)?;
    let n_drops = teacher.n_layers() - target_layers;
    let t0 = Instant::now();
    let (pruned, reports) = direct_prune(teacher, calib, n_drops)?;
    let seconds = t0.elapsed().as_secs_f64() / n_drops as f64;
    let mut logs = Vec::new();
    let mut current = teacher.clone();
    for (i, report) in reports.iter().enumerate() {
        current = current.remove_block(report.chosen)?;
        let entry = IterationLog {
            iter: i + 1,
            phase: Phase::Prune,
            dropped_origin_index: report.chosen_origin,
            scores: report.scores.clone(),
            loss_summary: None,
            metrics: s.eval.evaluate(&current)?,
            n_layers: current.n_layers(),
            seconds,
            seed: s.seed,
        };
        record(out, &mut writer, &current, &entry)?;
        logs.push(entry);
    }
    debug_assert!(current.params_bit_eq(&pruned));

    let t0 = Instant::now();
    let cfg = RecoveryConfig {
        seed: recovery_seed(s.recovery.seed, 1),
        ..s.recovery.clone()
    };
    let (recovered, rlog) = recover(teacher, &pruned, s.recovery_data, &cfg)?;
    let entry = IterationLog {
        iter: n_drops,
        phase: Phase::Recover,
        dropped_origin_index: reports.last().expect("n_drops ≥ 1").chosen_origin,
        scores: Vec::new(),
        loss_summary: LossSummary::from_log(&rlog),
        metrics: s.eval.evaluate(&recovered)?,
        n_layers: recovered.n_layers(),
        seconds: t0.elapsed().as_secs_f64(),
        seed: cfg.seed,
    };
    record(out, &mut writer, &recovered, &entry)?;
    logs.push(entry);
    Ok((recovered, logs))
}

/// Drop sequence and block counts reconstructed from a run log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dropped: Vec<usize>,
    /// Block count after each prune phase.
    pub layers: Vec<usize>,
    pub final_layers: usize,
}

pub fn summarize(logs: &[IterationLog]) -> Result<RunSummary> {
    ensure!(!logs.is_empty(), "summarize: empty run log");
    let mut last_iter = 0;
    let mut dropped = Vec::new();
    let mut layers = Vec::new();
    for e in logs {
        match e.phase {
            Phase::Prune => {
                ensure!(e.iter > last_iter, "run log: iteration {} after {last_iter}", e.iter);
                last_iter = e.iter;
                dropped.push(e.dropped_origin_index);
                layers.push(e.n_layers);
            }
            Phase::Recover => ensure!(
                e.iter == last_iter,
                "run log: recover entry for iteration {} follows iteration {last_iter}",
                e.iter
            ),
        }
    }
    Ok(RunSummary {
        dropped,
        layers,
        final_layers: logs.last().expect("non-empty").n_layers,
    })
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<IterationLog>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| Error::input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub direct: f64,
    pub iterative: f64,
    /// Positive when the iterative arm is better: `direct − iterative` for
    /// perplexity, `iterative − direct` for accuracies.
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    /// Mean probe accuracy per arm and the mean probe diff.
    pub direct_avg: f64,
    pub iterative_avg: f64,
    pub avg_diff: f64,
    pub direct_layers: usize,
    pub iterative_layers: usize,
}

pub const PERPLEXITY: &str = "perplexity";

/// `Diff` for one metric.
pub fn metric_diff(metric: &str, direct: f64, iterative: f64) -> f64 {
    if metric == PERPLEXITY {
        direct - iterative
    } else {
        iterative - direct
    }
}

fn final_metrics(logs: &[IterationLog]) -> Result<&IterationLog> {
    logs.last().ok_or_else(|| Error::contract("compare: empty log"))
}

/// Compares the last evaluated state of each arm.
pub fn compare(iterative: &[IterationLog], direct: &[IterationLog]) -> Result<ComparisonReport> {
    let it = final_metrics(iterative)?;
    let di = final_metrics(direct)?;
    let (im, dm) = (&it.metrics, &di.metrics);
    ensure!(
        im.probes.keys().eq(dm.probes.keys()),
        "compare: metric sets differ ({:?} vs {:?})",
        dm.probes.keys().collect::<Vec<_>>(),
        im.probes.keys().collect::<Vec<_>>()
    );
    let mut rows = vec![ComparisonRow {
        metric: PERPLEXITY.into(),
        direct: dm.perplexity,
        iterative: im.perplexity,
        diff: metric_diff(PERPLEXITY, dm.perplexity, im.perplexity),
    }];
    for (name, &d) in &dm.probes {
        let i = im.probes[name];
        rows.push(ComparisonRow {
            metric: name.clone(),
            direct: d,
            iterative: i,
            diff: metric_diff(name, d, i),
        });
    }
    let probes = &rows[1..];
    let mean = |f: fn(&ComparisonRow) -> f64| {
        if probes.is_empty() {
            0.0
        } else {
            probes.iter().map(f).sum::<f64>() / probes.len() as f64
        }
    };
    Ok(ComparisonReport {
        direct_avg: mean(|r| r.direct),
        iterative_avg: mean(|r| r.iterative),
        avg_diff: mean(|r| r.diff),
        rows,
        direct_layers: di.n_layers,
        iterative_layers: it.n_layers,
    })
}

impl ComparisonReport {
    /// Approaches as rows, metrics as columns.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<14}", "approach");
        for r in &self.rows {
            let _ = write!(s, "{:>14}", r.metric);
        }
        let _ = writeln!(s, "{:>14}", "avg");
        let line = |s: &mut String, name: &str, f: &dyn Fn(&ComparisonRow) -> f64, avg: f64| {
            let _ = write!(s, "{name:<14}");
            for r in &self.rows {
                let _ = write!(s, "{:>14.4}", f(r));
            }
            let _ = writeln!(s, "{avg:>14.4}");
        };
        line(&mut s, "Direct+R", &|r| r.direct, self.direct_avg);
        line(&mut s, "Iterative+R", &|r| r.iterative, self.iterative_avg);
        line(&mut s, "Diff", &|r| r.diff, self.avg_diff);
        s
    }

    pub fn metrics(&self) -> BTreeMap<&str, &ComparisonRow> {
        self.rows.iter().map(|r| (r.metric.as_str(), r)).collect()
    }
}
