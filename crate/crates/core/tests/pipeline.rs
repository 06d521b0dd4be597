mod common;

use common::fixtures::{calibration, distinct_blocks, small_model, text_tokens};
use iterprune::eval::{build_probes, EvalSuite, ProbeConfig};
use iterprune::model::{load_checkpoint, TransformerModel};
use iterprune::pipeline::{
    compare, direct_arm, iterate, metric_diff, read_log, summarize, Calibration, IterateSettings, Phase, Retention,
    RunOutput, StopCriterion,
};
use iterprune::pruning::CalibrationSet;
use iterprune::recovery::RecoveryConfig;

fn suite(tokens: &[u32]) -> EvalSuite {
    let probes = build_probes(
        tokens,
        &ProbeConfig {
            items_per_family: 4,
            context_len: 8,
            continuation_len: 4,
            candidates: 3,
            seed: 1,
        },
    )
    .unwrap();
    EvalSuite {
        perplexity_tokens: tokens[..200].to_vec(),
        context_len: 16,
        probes,
    }
}

fn recovery() -> RecoveryConfig {
    RecoveryConfig {
        token_budget: 4 * 2 * 16,
        batch_size: 2,
        grad_accum_steps: 1,
        learning_rate: 1e-3,
        max_seq_len: 16,
        adapter_rank: 2,
        adapter_alpha: 16.0,
        seed: 3,
    }
}

struct Fixture {
    teacher: TransformerModel,
    calib: CalibrationSet,
    data: Vec<u32>,
    suite: EvalSuite,
}

fn fixture() -> Fixture {
    let data = text_tokens(20);
    Fixture {
        teacher: distinct_blocks(small_model(8, 1), 1),
        calib: calibration(3, 12, 4),
        suite: suite(&data),
        data,
    }
}

fn settings<'a>(f: &'a Fixture, stop: StopCriterion, recovery_enabled: bool, out: Option<RunOutput>) -> IterateSettings<'a> {
    IterateSettings {
        calibration: Calibration::Fixed(&f.calib),
        recovery_data: &f.data,
        recovery: recovery(),
        recovery_enabled,
        stop,
        eval: &f.suite,
        output: out,
        seed: 0,
    }
}

#[test]
fn eight_to_six_takes_two_iterations() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let s = settings(&f, StopCriterion::target(6), true, Some(RunOutput::new(dir.path())));
    let (fin, logs) = iterate(&f.teacher, &s).unwrap();
    assert_eq!(fin.n_layers(), 6);
    let phases: Vec<(usize, Phase)> = logs.iter().map(|l| (l.iter, l.phase)).collect();
    assert_eq!(
        phases,
        vec![(1, Phase::Prune), (1, Phase::Recover), (2, Phase::Prune), (2, Phase::Recover)]
    );
    assert_eq!(fin.drop_history().len(), 2);
    let mut all: Vec<usize> = fin.origin_indices().iter().chain(fin.drop_history()).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..8).collect::<Vec<_>>());

    for j in 1..=2 {
        let p = load_checkpoint(dir.path().join(format!("iter{j}_pruned.itrb"))).unwrap();
        let r = load_checkpoint(dir.path().join(format!("iter{j}_recovered.itrb"))).unwrap();
        assert_eq!(p.n_layers(), r.n_layers());
        assert_eq!(p.origin_indices(), r.origin_indices());
        assert!(!p.params_bit_eq(&r));
        assert_eq!(p.drop_history().len(), j);
    }

    // The log on disk replays to the live run.
    let replayed = read_log(dir.path().join("run_log.jsonl")).unwrap();
    assert_eq!(replayed, logs);
    let summary = summarize(&replayed).unwrap();
    assert_eq!(summary.dropped, fin.drop_history());
    assert_eq!(summary.layers, vec![7, 6]);
    assert_eq!(summary.final_layers, 6);
}

#[test]
fn without_recovery_only_prune_entries() {
    let f = fixture();
    let (fin, logs) = iterate(&f.teacher, &settings(&f, StopCriterion::target(5), false, None)).unwrap();
    assert_eq!(fin.n_layers(), 5);
    assert_eq!(logs.len(), 3);
    assert!(logs.iter().all(|l| l.phase == Phase::Prune && l.loss_summary.is_none()));
}

#[test]
fn max_iterations_stops_early() {
    let f = fixture();
    let stop = StopCriterion {
        target_layers: Some(2),
        max_iterations: Some(1),
    };
    let (fin, _) = iterate(&f.teacher, &settings(&f, stop, false, None)).unwrap();
    assert_eq!(fin.n_layers(), 7);
}

#[test]
fn target_must_be_below_layer_count() {
    let f = fixture();
    assert!(iterate(&f.teacher, &settings(&f, StopCriterion::target(8), true, None)).is_err());
    let pruned = f.teacher.remove_block(0).unwrap();
    assert!(iterate(&pruned, &settings(&f, StopCriterion::target(5), true, None)).is_err());
}

#[test]
fn same_seed_same_run() {
    let f = fixture();
    let (a, la) = iterate(&f.teacher, &settings(&f, StopCriterion::target(6), true, None)).unwrap();
    let (b, lb) = iterate(&f.teacher, &settings(&f, StopCriterion::target(6), true, None)).unwrap();
    assert!(a.params_bit_eq(&b));
    let strip = |l: &[iterprune::pipeline::IterationLog]| {
        l.iter()
            .map(|e| (e.dropped_origin_index, e.scores.clone(), e.metrics.clone(), e.loss_summary.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&la), strip(&lb));
}

#[test]
fn keep_last_retention_removes_older_checkpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        retention: Retention::LastOnly,
        ..RunOutput::new(dir.path())
    };
    iterate(&f.teacher, &settings(&f, StopCriterion::target(5), true, Some(out))).unwrap();
    assert!(!dir.path().join("iter1_pruned.itrb").exists());
    assert!(!dir.path().join("iter2_recovered.itrb").exists());
    assert!(dir.path().join("iter3_pruned.itrb").exists());
    assert!(dir.path().join("iter3_recovered.itrb").exists());
}

#[test]
fn failed_phase_leaves_flushed_log() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let short = &f.data[..8];
    let s = IterateSettings {
        recovery_data: short,
        ..settings(&f, StopCriterion::target(6), true, Some(RunOutput::new(dir.path())))
    };
    assert!(iterate(&f.teacher, &s).is_err());
    let logs = read_log(dir.path().join("run_log.jsonl")).unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].phase, Phase::Prune);
    assert!(dir.path().join("iter1_pruned.itrb").exists());
}

#[test]
fn per_iteration_calibration() {
    let f = fixture();
    let draw = |iter: usize| Ok(calibration(3, 12, 100 + iter as u64));
    let s = IterateSettings {
        calibration: Calibration::PerIteration(&draw),
        ..settings(&f, StopCriterion::target(6), false, None)
    };
    let (fin, _) = iterate(&f.teacher, &s).unwrap();
    assert_eq!(fin.n_layers(), 6);
}

#[test]
fn comparison_matches_recomputation() {
    let f = fixture();
    let (_, it) = iterate(&f.teacher, &settings(&f, StopCriterion::target(6), true, None)).unwrap();
    let (di_model, di) = direct_arm(&f.teacher, &f.calib, 6, &settings(&f, StopCriterion::target(6), true, None)).unwrap();
    assert_eq!(di_model.n_layers(), 6);
    assert_eq!(di.iter().filter(|l| l.phase == Phase::Prune).count(), 2);
    assert_eq!(di.last().unwrap().phase, Phase::Recover);

    let report = compare(&it, &di).unwrap();
    let last_it = &it.last().unwrap().metrics;
    let last_di = &di.last().unwrap().metrics;
    assert_eq!(report.rows.len(), 1 + last_it.probes.len());
    assert_eq!(report.rows[0].diff, last_di.perplexity - last_it.perplexity);
    let mut diffs = Vec::new();
    for row in &report.rows[1..] {
        let d = last_it.probes[&row.metric] - last_di.probes[&row.metric];
        assert_eq!(row.diff, d);
        assert_eq!(row.diff, metric_diff(&row.metric, row.direct, row.iterative));
        diffs.push(d);
    }
    assert_eq!(report.avg_diff, diffs.iter().sum::<f64>() / diffs.len() as f64);

    let same = compare(&it, &it).unwrap();
    assert!(same.rows.iter().all(|r| r.diff == 0.0));
}
