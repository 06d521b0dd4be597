use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use iterprune::config::RunConfig;
use iterprune::corpus::Corpus;
use iterprune::error::{Error, Result};
use iterprune::model::{load_checkpoint, save_checkpoint, TransformerModel};
use iterprune::pipeline::{
    compare, direct_arm, iterate, read_log, summarize, Calibration, IterateSettings, Retention, RunOutput,
};
use iterprune::pruning::prune_one;
use iterprune::recovery::recover;
use iterprune::eval::windowed_nll;
use iterprune::train::pretrain_with_progress;

#[derive(Parser)]
#[command(name = "iterprune", about = "Iterative block pruning with distillation recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; every component seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher from scratch on the corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Remove the single least important block.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Distill a pruned model toward its unpruned teacher.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Alternate pruning and recovery down to the target size.
    Iterate {
        #[command(flatten)]
        common: Common,
        /// The unpruned teacher.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target_layers: Option<usize>,
        #[arg(long)]
        no_recovery: bool,
        /// Keep only the latest iteration's checkpoints.
        #[arg(long)]
        keep_last: bool,
    },
    /// Prune straight to the target size, then recover once.
    Direct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target_layers: Option<usize>,
    },
    /// Perplexity and probe accuracies of one checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Direct+R against Iterative+R. Runs both arms from `--model`, or reads
    /// two existing run logs.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present_all = ["iterative_log", "direct_log"])]
        model: Option<PathBuf>,
        #[arg(long)]
        target_layers: Option<usize>,
        #[arg(long, requires = "direct_log")]
        iterative_log: Option<PathBuf>,
        #[arg(long, requires = "iterative_log")]
        direct_log: Option<PathBuf>,
    },
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn start(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.apply_seed(seed);
        }
        if let Some(out) = &common.out {
            cfg.out_dir = out.clone();
        }
        tweak(&mut cfg);
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write(&out.join("resolved_config.json"), &cfg.to_json()?)?;
        Ok(Self { cfg, out })
    }

    fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.cfg.corpus)
    }

    fn settings<'a>(
        &self,
        corpus: &'a Corpus,
        calib: &'a iterprune::pruning::CalibrationSet,
        suite: &'a iterprune::eval::EvalSuite,
        out: PathBuf,
        log_name: &str,
    ) -> IterateSettings<'a> {
        IterateSettings {
            calibration: Calibration::Fixed(calib),
            recovery_data: corpus.train(),
            recovery: self.cfg.recovery.clone(),
            recovery_enabled: self.cfg.pipeline.recovery_enabled,
            stop: self.cfg.stop,
            eval: suite,
            output: Some(RunOutput {
                dir: out,
                retention: self.cfg.pipeline.retention,
                log_name: log_name.into(),
            }),
            seed: self.cfg.seed,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load(path: &Path) -> Result<TransformerModel> {
    load_checkpoint(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let r = Run::start(&common, |_| {})?;
            let corpus = r.corpus()?;
            let init = TransformerModel::init(r.cfg.model.clone())?;
            let val = corpus.validation();
            let ctx = r.cfg.pretrain.seq_len;
            let before = windowed_nll(&init, &val, ctx)?;
            let (model, log) = pretrain_with_progress(&init, corpus.train(), &r.cfg.pretrain, &mut |step, loss| {
                if step % 50 == 0 {
                    eprintln!("step {step} loss {loss:.4}");
                }
            })?;
            let after = windowed_nll(&model, &val, ctx)?;
            save_checkpoint(&model, r.out.join("teacher.itrb"))?;
            write_json(
                &r.out.join("pretrain_log.json"),
                &serde_json::json!({
                    "losses": log.losses,
                    "tokens_seen": log.tokens_seen,
                    "held_out_loss_before": before.0 / before.1 as f64,
                    "held_out_loss_after": after.0 / after.1 as f64,
                }),
            )?;
        }
        Command::Prune { common, model } => {
            let r = Run::start(&common, |_| {})?;
            let m = load(&model)?;
            let calib = r.corpus()?.calibration()?;
            let (pruned, report) = prune_one(&m, &calib)?;
            save_checkpoint(&pruned, r.out.join("pruned.itrb"))?;
            write_json(&r.out.join("importance.json"), &report)?;
        }
        Command::Recover { common, teacher, model } => {
            let r = Run::start(&common, |_| {})?;
            let t = load(&teacher)?;
            let s = load(&model)?;
            let corpus = r.corpus()?;
            let (rec, log) = recover(&t, &s, corpus.train(), &r.cfg.recovery)?;
            save_checkpoint(&rec, r.out.join("recovered.itrb"))?;
            write_json(&r.out.join("recovery_log.json"), &log)?;
        }
        Command::Iterate {
            common,
            model,
            target_layers,
            no_recovery,
            keep_last,
        } => {
            let r = Run::start(&common, |c| {
                if let Some(k) = target_layers {
                    c.stop.target_layers = Some(k);
                }
                if no_recovery {
                    c.pipeline.recovery_enabled = false;
                }
                if keep_last {
                    c.pipeline.retention = Retention::LastOnly;
                }
            })?;
            let teacher = load(&model)?;
            let corpus = r.corpus()?;
            let calib = corpus.calibration()?;
            let suite = r.cfg.eval.suite(&corpus)?;
            let resample = |iter: usize| corpus.resample_calibration(&r.cfg.corpus, r.cfg.pruning.seed.wrapping_add(iter as u64));
            let mut settings = r.settings(&corpus, &calib, &suite, r.out.clone(), "run_log.jsonl");
            if r.cfg.pruning.resample_per_iteration {
                settings.calibration = Calibration::PerIteration(&resample);
            }
            let (fin, logs) = iterate(&teacher, &settings)?;
            save_checkpoint(&fin, r.out.join("final.itrb"))?;
            write_json(&r.out.join("summary.json"), &summarize(&logs)?)?;
        }
        Command::Direct {
            common,
            model,
            target_layers,
        } => {
            let r = Run::start(&common, |c| {
                if let Some(k) = target_layers {
                    c.stop.target_layers = Some(k);
                }
            })?;
            direct(&r, &load(&model)?, r.out.clone())?;
        }
        Command::Eval { common, model } => {
            let r = Run::start(&common, |_| {})?;
            let m = load(&model)?;
            let suite = r.cfg.eval.suite(&r.corpus()?)?;
            let metrics = suite.evaluate(&m)?;
            write_json(&r.out.join("eval_report.json"), &metrics)?;
            let mut text = format!("perplexity {:.6}\n", metrics.perplexity);
            for (k, v) in &metrics.probes {
                text.push_str(&format!("{k} {v:.6}\n"));
            }
            write(&r.out.join("eval_report.txt"), &text)?;
        }
        Command::Compare {
            common,
            model,
            target_layers,
            iterative_log,
            direct_log,
        } => {
            let r = Run::start(&common, |c| {
                if let Some(k) = target_layers {
                    c.stop.target_layers = Some(k);
                }
            })?;
            let (it_logs, di_logs) = match (iterative_log, direct_log, model) {
                (Some(i), Some(d), _) => (read_log(i)?, read_log(d)?),
                (_, _, Some(m)) => {
                    let teacher = load(&m)?;
                    let corpus = r.corpus()?;
                    let calib = corpus.calibration()?;
                    let suite = r.cfg.eval.suite(&corpus)?;
                    let settings = r.settings(&corpus, &calib, &suite, r.out.join("iterative"), "run_log.jsonl");
                    let (_, it) = iterate(&teacher, &settings)?;
                    let di = direct(&r, &teacher, r.out.join("direct"))?;
                    (it, di)
                }
                _ => return Err(Error::Input("compare needs --model or both run logs".into())),
            };
            let report = compare(&it_logs, &di_logs)?;
            write_json(&r.out.join("comparison.json"), &report)?;
            write(&r.out.join("comparison.txt"), &report.to_text())?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn direct(r: &Run, teacher: &TransformerModel, out: PathBuf) -> Result<Vec<iterprune::pipeline::IterationLog>> {
    let k = r
        .cfg
        .stop
        .target_layers
        .ok_or_else(|| Error::Input("direct pruning needs stop.target_layers".into()))?;
    let corpus = r.corpus()?;
    let calib = corpus.calibration()?;
    let suite = r.cfg.eval.suite(&corpus)?;
    let settings = r.settings(&corpus, &calib, &suite, out.clone(), "direct_log.jsonl");
    let (fin, logs) = direct_arm(teacher, &calib, k, &settings)?;
    save_checkpoint(&fin, out.join("final.itrb"))?;
    Ok(logs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
