//! End-to-end runs on generated images with the tiny backbone.

use std::path::Path;
use std::time::Instant;

use leukonet::experiments::{self, files, run_split, ExperimentPlan, MonteCarloOptions};
use leukonet::ingest::{scan_dataset, DatasetManifest, NamingRule};
use leukonet::model::ModelConfig;
use leukonet::splitter::{fixed_split, Split, SplitTargets};
use leukonet::synthetic::{write_dataset, SyntheticSpec};
use leukonet::training::{early_stop_check, select_checkpoint, Checkpoint, EpochHistory, StopDecision, TrainConfig};
use leukonet::transforms::{AugmentPolicy, AugmentTarget};

fn dataset(root: &Path, spec: &SyntheticSpec) -> DatasetManifest {
    write_dataset(root, spec).unwrap();
    scan_dataset(root, &NamingRule::default()).unwrap()
}

fn plan(manifest: &DatasetManifest, max_epochs: usize) -> ExperimentPlan {
    ExperimentPlan {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            max_epochs,
            ..TrainConfig::default()
        },
        augment: AugmentPolicy::default(),
        augment_target: AugmentTarget::ReplicasOnly,
        balance: true,
        targets: SplitTargets::proportional(manifest, [0.7, 0.15, 0.15]).unwrap(),
    }
}

#[test]
fn smoke_run_learns_and_selects_by_rule() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let manifest = dataset(data.path(), &SyntheticSpec::default());
    assert_eq!(manifest.len(), 600);
    let plan = plan(&manifest, 20);
    let split = fixed_split(&manifest, &plan.targets, 7).unwrap();

    let started = Instant::now();
    let run = run_split(&manifest, &split, &plan, Some(out.path())).unwrap();
    let elapsed = started.elapsed();
    let h = &run.outcome.history;
    eprintln!("{} epochs in {elapsed:?}; val f1 {:?}", h.epochs.len(), h.val_f1());

    let best = run.outcome.checkpoint.val_f1;
    assert!(best >= 0.95, "selected validation F1 {best}");
    assert!(elapsed.as_secs() < 300);

    // selection and stopping agree with the rules applied to the history
    let chosen = select_checkpoint(&h.candidates(), plan.train.selection_threshold).unwrap();
    assert_eq!(Some(chosen.epoch), h.best_epoch);
    assert_eq!(run.outcome.checkpoint.epoch, chosen.epoch);
    let vf = h.val_f1();
    for k in 1..vf.len() {
        assert_eq!(
            early_stop_check(&vf[..k], plan.train.patience, plan.train.min_delta),
            StopDecision::Continue
        );
    }
    if h.stopped_early {
        assert_eq!(
            early_stop_check(&vf, plan.train.patience, plan.train.min_delta),
            StopDecision::Stop
        );
    }

    // stored artifacts agree with the in-memory outcome
    let ck = Checkpoint::load(&out.path().join(files::BEST)).unwrap();
    assert_eq!(ck, run.outcome.checkpoint);
    assert_eq!(
        EpochHistory::read_json(&out.path().join(files::HISTORY_JSON)).unwrap(),
        *h
    );
    let rows = leukonet::evaluation::read_predictions(&out.path().join(files::VAL_PREDICTIONS)).unwrap();
    let replay = leukonet::evaluation::evaluate_rows(&rows).unwrap();
    assert_eq!(replay, run.outcome.val_report);
    assert!(run.test_report.is_some());
    assert!(split.counts(Split::Test).images() > 0);
}

#[test]
fn monte_carlo_resumes_to_the_same_summary() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        all_patients: 6,
        hem_patients: 5,
        images_per_patient: 4,
        size: 32,
        ..SyntheticSpec::default()
    };
    let manifest = dataset(data.path(), &spec);
    let mut plan = plan(&manifest, 2);
    plan.model.input_size = 32;
    plan.model.tiny_width = 8;
    let opts = MonteCarloOptions {
        iterations: 3,
        base_seed: 100,
        resume: false,
        workers: 1,
    };
    let first = experiments::run_monte_carlo(&manifest, &plan, &opts, out.path()).unwrap();
    assert_eq!(first.requested, 3);
    assert_eq!(first.seeds(), vec![100, 101, 102]);
    assert!(!first.has_failures, "{:?}", first.failed);

    // distinct splits, each leak-free
    let splits: Vec<String> = (0..3)
        .map(|i| std::fs::read_to_string(experiments::iteration_dir(out.path(), i).join(files::SPLIT)).unwrap())
        .collect();
    assert!(splits[0] != splits[1] && splits[1] != splits[2]);

    // simulate an interruption by dropping one iteration's completion marker
    std::fs::remove_file(experiments::iteration_dir(out.path(), 1).join(files::SEED)).unwrap();
    let resumed = experiments::run_monte_carlo(
        &manifest,
        &plan,
        &MonteCarloOptions { resume: true, ..opts },
        out.path(),
    )
    .unwrap();
    assert_eq!(resumed, first);

    let f1: Vec<f64> = first
        .iterations
        .iter()
        .map(|r| r.report().unwrap().weighted.f1)
        .collect();
    let mean = f1.iter().sum::<f64>() / 3.0;
    assert!((first.metrics["f1"].mean - mean).abs() < 1e-12);
}
