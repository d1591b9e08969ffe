//! Repeated-resplit experiments, variant comparison and ablations.

pub mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use stats::{paired_t_test, summarize_runs, wilcoxon_signed_rank, Summary, TestMethod, TestResult};

use crate::error::{Error, Result};
use crate::evaluation::{write_predictions, MetricsReport};
use crate::ingest::DatasetManifest;
use crate::model::{Model, ModelConfig};
use crate::splitter::{materialize, random_resplit, write_split, Split, SplitAssignment, SplitTargets};
use crate::training::{self, fingerprint, ImageLoader, LossKind, TrainConfig, TrainEvent, TrainOutcome};
use crate::transforms::{balance_minority, AugmentPolicy, AugmentTarget};

/// Everything needed to train and evaluate on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub augment_target: AugmentTarget,
    /// Replicate minority training images up to the majority count.
    pub balance: bool,
    pub targets: SplitTargets,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }

    /// The plan with training, initialization and augmentation reseeded.
    pub fn reseeded(&self, seed: u64) -> ExperimentPlan {
        let mut plan = self.clone();
        plan.train.seed = seed;
        plan.augment.rng_seed = seed;
        plan
    }
}

/// Trained model and metrics of one split.
pub struct SplitRun {
    pub model: Model,
    pub outcome: TrainOutcome,
    /// Absent when the split has no test patients.
    pub test_report: Option<MetricsReport>,
}

pub mod files {
    pub const SPLIT: &str = "split.tsv";
    pub const HISTORY_TSV: &str = "history.tsv";
    pub const HISTORY_JSON: &str = "history.json";
    pub const BEST: &str = "best.safetensors";
    pub const FINAL: &str = "final.safetensors";
    pub const VAL_METRICS: &str = "val_metrics.json";
    pub const VAL_PREDICTIONS: &str = "val_predictions.tsv";
    pub const TEST_METRICS: &str = "test_metrics.json";
    pub const TEST_PREDICTIONS: &str = "test_predictions.tsv";
    pub const ERROR: &str = "error.txt";
    pub const SEED: &str = "seed.txt";
}

/// Trains on the split's training patients, selects a checkpoint on its
/// validation patients and evaluates on its test patients. With `out`, all
/// artifacts are written there.
pub fn run_split(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    plan: &ExperimentPlan,
    out: Option<&Path>,
) -> Result<SplitRun> {
    plan.validate()?;
    split.validate(manifest)?;
    let parts = materialize(manifest, split)?;
    let train_set = if plan.balance {
        balance_minority(&parts.training)?
    } else {
        parts.training.clone()
    };
    let fp = plan.fingerprint()?;
    let mut model = Model::build(&plan.model, plan.train.seed)?;
    let mut loader = ImageLoader::new(plan.model.input_size, plan.augment.clone(), plan.augment_target)
        .with_cache_for(train_set.len() + parts.validation.len() + parts.test.len());

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_split(split, &dir.join(files::SPLIT))?;
    }
    let mut sink_error = None;
    let mut on_event = |event: TrainEvent<'_>| {
        if let (Some(dir), TrainEvent::Improved(ck)) = (out, event) {
            if let Err(e) = ck.save(&dir.join(files::BEST)) {
                sink_error.get_or_insert(e);
            }
        }
    };
    let outcome = training::train(
        &mut model,
        &train_set,
        &parts.validation,
        &plan.train,
        &mut loader,
        &fp,
        &mut on_event,
    )?;
    if let Some(e) = sink_error {
        return Err(e);
    }

    let test = if parts.test.is_empty() {
        None
    } else {
        Some(training::predict(
            &model,
            &parts.test.records,
            Split::Test,
            &mut loader,
            &plan.train,
        )?)
    };
    let test_report = test.as_ref().map(|p| p.report()).transpose()?;

    if let Some(dir) = out {
        outcome.history.write_tsv(&dir.join(files::HISTORY_TSV))?;
        outcome.history.write_json(&dir.join(files::HISTORY_JSON))?;
        outcome.checkpoint.save(&dir.join(files::BEST))?;
        outcome.final_checkpoint.save(&dir.join(files::FINAL))?;
        outcome.val_report.write_json(&dir.join(files::VAL_METRICS))?;
        let val = training::predict(
            &model,
            &parts.validation.records,
            Split::Validation,
            &mut loader,
            &plan.train,
        )?;
        write_predictions(&val.rows, &dir.join(files::VAL_PREDICTIONS))?;
        if let (Some(p), Some(r)) = (&test, &test_report) {
            write_predictions(&p.rows, &dir.join(files::TEST_PREDICTIONS))?;
            r.write_json(&dir.join(files::TEST_METRICS))?;
        }
    }
    Ok(SplitRun {
        model,
        outcome,
        test_report,
    })
}

/// Metric names summarized across iterations.
pub const SUMMARY_METRICS: [&str; 8] = [
    "accuracy",
    "precision",
    "recall",
    "f1",
    "macro_f1",
    "sensitivity",
    "specificity",
    "auc",
];

pub fn metric(report: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "accuracy" => Some(report.accuracy),
        "precision" => Some(report.weighted.precision),
        "recall" => Some(report.weighted.recall),
        "f1" => Some(report.weighted.f1),
        "macro_f1" => Some(report.macro_avg.f1),
        "sensitivity" => Some(report.sensitivity),
        "specificity" => Some(report.specificity),
        "auc" => report.auc,
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum IterationStatus {
    Completed { report: MetricsReport },
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub index: usize,
    pub seed: u64,
    pub status: IterationStatus,
}

impl IterationResult {
    pub fn report(&self) -> Option<&MetricsReport> {
        match &self.status {
            IterationStatus::Completed { report } => Some(report),
            IterationStatus::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarloOptions {
    pub iterations: usize,
    pub base_seed: u64,
    /// Reuse iterations whose results are already on disk.
    pub resume: bool,
    /// Iterations trained concurrently; 1 runs them in order.
    pub workers: usize,
}

impl Default for MonteCarloOptions {
    fn default() -> Self {
        MonteCarloOptions {
            iterations: 100,
            base_seed: 0,
            resume: false,
            workers: 1,
        }
    }
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub schema_version: u32,
    pub fingerprint: String,
    pub requested: usize,
    pub base_seed: u64,
    /// Set when any iteration failed; failed iterations are excluded from
    /// `metrics` and listed in `failed`.
    pub has_failures: bool,
    pub failed: Vec<usize>,
    pub metrics: BTreeMap<String, Summary>,
    pub iterations: Vec<IterationResult>,
}

impl MonteCarloSummary {
    pub fn from_iterations(
        fingerprint: String,
        base_seed: u64,
        mut iterations: Vec<IterationResult>,
    ) -> Result<MonteCarloSummary> {
        iterations.sort_by_key(|r| r.index);
        let failed: Vec<usize> = iterations
            .iter()
            .filter(|r| r.report().is_none())
            .map(|r| r.index)
            .collect();
        let mut metrics = BTreeMap::new();
        for name in SUMMARY_METRICS {
            let values: Vec<f64> = iterations
                .iter()
                .filter_map(|r| r.report().and_then(|m| metric(m, name)))
                .collect();
            if !values.is_empty() {
                metrics.insert(name.to_string(), summarize_runs(&values)?);
            }
        }
        Ok(MonteCarloSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            fingerprint,
            requested: iterations.len(),
            base_seed,
            has_failures: !failed.is_empty(),
            failed,
            metrics,
            iterations,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.iterations.iter().map(|r| r.seed).collect()
    }

    /// Per-iteration values of one metric over completed iterations.
    pub fn series(&self, name: &str) -> Series {
        let (seeds, values) = self
            .iterations
            .iter()
            .filter_map(|r| r.report().and_then(|m| metric(m, name)).map(|v| (r.seed, v)))
            .unzip();
        Series {
            name: name.to_string(),
            seeds,
            values,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<MonteCarloSummary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per iteration with every summary metric; failed rows are
    /// marked and left empty.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        let mut header = vec!["iteration".to_string(), "seed".into(), "status".into()];
        header.extend(SUMMARY_METRICS.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for r in &self.iterations {
            let mut row = vec![r.index.to_string(), r.seed.to_string()];
            match r.report() {
                Some(m) => {
                    row.push("completed".into());
                    row.extend(
                        SUMMARY_METRICS
                            .iter()
                            .map(|n| metric(m, n).map(|v| format!("{v:?}")).unwrap_or_default()),
                    );
                }
                None => {
                    row.push("failed".into());
                    row.extend(SUMMARY_METRICS.iter().map(|_| String::new()));
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn iteration_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("iter_{index:03}"))
}

fn load_finished(dir: &Path, seed: u64) -> Option<MetricsReport> {
    let stored: u64 = fs::read_to_string(dir.join(files::SEED)).ok()?.trim().parse().ok()?;
    if stored != seed {
        return None;
    }
    MetricsReport::read_json(&dir.join(files::TEST_METRICS)).ok()
}

fn run_iteration(
    manifest: &DatasetManifest,
    plan: &ExperimentPlan,
    index: usize,
    seed: u64,
    out: &Path,
    resume: bool,
) -> IterationResult {
    let dir = iteration_dir(out, index);
    if resume {
        if let Some(report) = load_finished(&dir, seed) {
            log::info!("iteration {index}: reusing results in {}", dir.display());
            return IterationResult {
                index,
                seed,
                status: IterationStatus::Completed { report },
            };
        }
    }
    let attempt = || -> Result<MetricsReport> {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let split = random_resplit(manifest, &plan.targets, seed)?;
        split.validate(manifest)?;
        let run = run_split(manifest, &split, &plan.reseeded(seed), Some(&dir))?;
        let report = run
            .test_report
            .ok_or_else(|| Error::InvalidInput("split targets leave the test split empty".into()))?;
        // written last: its presence marks the iteration as finished
        fs::write(dir.join(files::SEED), format!("{seed}\n")).map_err(|e| Error::io(&dir, e))?;
        Ok(report)
    };
    let status = match attempt() {
        Ok(report) => IterationStatus::Completed { report },
        Err(e) => {
            log::error!("iteration {index} (seed {seed}) failed: {e}");
            let _ = fs::create_dir_all(&dir);
            let _ = fs::write(dir.join(files::ERROR), format!("{e}\n"));
            IterationStatus::Failed { error: e.to_string() }
        }
    };
    IterationResult { index, seed, status }
}

/// Repeats resplit, training and test evaluation with seeds
/// `base_seed + i`. Failed iterations are recorded, never dropped.
pub fn run_monte_carlo(
    manifest: &DatasetManifest,
    plan: &ExperimentPlan,
    opts: &MonteCarloOptions,
    out: &Path,
) -> Result<MonteCarloSummary> {
    if opts.iterations == 0 {
        return Err(Error::Config("at least one iteration is required".into()));
    }
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(opts.iterations));
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= opts.iterations {
            break;
        }
        let r = run_iteration(manifest, plan, i, opts.base_seed + i as u64, out, opts.resume);
        results.lock().expect("no worker panicked").push(r);
    };
    std::thread::scope(|s| {
        for _ in 1..opts.workers.max(1) {
            s.spawn(work);
        }
        work();
    });

    let summary = MonteCarloSummary::from_iterations(
        plan.fingerprint()?,
        opts.base_seed,
        results.into_inner().expect("no worker panicked"),
    )?;
    summary.write_json(&out.join("summary.json"))?;
    summary.write_tsv(&out.join("iterations.tsv"))?;
    Ok(summary)
}

/// Values of one metric keyed by the seed that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant_a: String,
    pub variant_b: String,
    /// `b - a` per iteration.
    pub deltas: Vec<f64>,
    pub mean_delta: f64,
    /// Primary test.
    pub wilcoxon: Option<TestResult>,
    pub t_test: Option<TestResult>,
    /// Every delta is zero; no test is meaningful.
    pub no_difference: bool,
}

/// Paired comparison of two variants run on the same seeds.
pub fn compare_variants(a: &Series, b: &Series) -> Result<Comparison> {
    if a.values.len() != b.values.len() || a.seeds.len() != a.values.len() || b.seeds.len() != b.values.len() {
        return Err(Error::InvalidInput(format!(
            "unpaired inputs: {} values for '{}' and {} for '{}'",
            a.values.len(),
            a.name,
            b.values.len(),
            b.name
        )));
    }
    if a.seeds != b.seeds {
        return Err(Error::InvalidInput("unpaired inputs: iteration seeds differ".into()));
    }
    if a.values.is_empty() {
        return Err(Error::InvalidInput("nothing to compare".into()));
    }
    let deltas: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| y - x).collect();
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let wilcoxon = wilcoxon_signed_rank(&deltas);
    Ok(Comparison {
        variant_a: a.name.clone(),
        variant_b: b.name.clone(),
        no_difference: wilcoxon.is_none(),
        t_test: paired_t_test(&deltas),
        wilcoxon,
        mean_delta,
        deltas,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NoAugmentation,
    NoAttention,
    NoFocalLoss,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoAugmentation, Variant::NoAttention, Variant::NoFocalLoss];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoAugmentation => "no-augmentation",
            Variant::NoAttention => "no-attention",
            Variant::NoFocalLoss => "no-focal-loss",
        }
    }

    /// Without augmentation the minority class is neither replicated nor
    /// transformed; without focal loss plain cross-entropy is used.
    pub fn apply(self, plan: &ExperimentPlan) -> ExperimentPlan {
        let mut p = plan.clone();
        match self {
            Variant::NoAugmentation => {
                p.balance = false;
                p.augment_target = AugmentTarget::None;
            }
            Variant::NoAttention => p.model.attention = false,
            Variant::NoFocalLoss => p.train.loss = LossKind::CrossEntropy,
        }
        p
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub val_f1: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const FULL_MODEL: &str = "full";

impl AblationTable {
    /// Builds rows with deltas computed against the full model's F1.
    pub fn new(full_f1: f64, variants: &[(String, f64)]) -> AblationTable {
        let mut rows = vec![AblationRow {
            name: FULL_MODEL.into(),
            val_f1: full_f1,
            delta: 0.0,
        }];
        rows.extend(variants.iter().map(|(name, f1)| AblationRow {
            name: name.clone(),
            val_f1: *f1,
            delta: f1 - full_f1,
        }));
        AblationTable { rows }
    }

    /// Checks that the first row is the full model and every delta equals
    /// its row's F1 minus the full model's.
    pub fn verify(&self) -> Result<()> {
        let full = self
            .rows
            .first()
            .filter(|r| r.name == FULL_MODEL && r.delta == 0.0)
            .ok_or_else(|| Error::Integrity("ablation table must start with the full model".into()))?;
        for r in &self.rows {
            if r.delta != r.val_f1 - full.val_f1 {
                return Err(Error::Integrity(format!(
                    "ablation row '{}': delta {} != {} - {}",
                    r.name, r.delta, r.val_f1, full.val_f1
                )));
            }
        }
        Ok(())
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        self.verify()?;
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        w.write_record(["configuration", "val_f1", "delta"])?;
        for r in &self.rows {
            w.write_record([r.name.clone(), format!("{:?}", r.val_f1), format!("{:?}", r.delta)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Trains the full plan and each named variant on the same split and
/// tabulates validation F1.
pub fn run_ablation(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    plan: &ExperimentPlan,
    variants: &[String],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let parsed: Vec<Variant> = variants.iter().map(|v| v.parse()).collect::<Result<_>>()?;
    let sub = |name: &str| out.map(|o| o.join(name));
    let full = run_split(manifest, split, plan, sub(FULL_MODEL).as_deref())?;
    let mut rows = Vec::new();
    for v in parsed {
        log::info!("ablation variant {}", v.name());
        let run = run_split(manifest, split, &v.apply(plan), sub(v.name()).as_deref())?;
        rows.push((v.name().to_string(), run.outcome.checkpoint.val_f1));
    }
    let table = AblationTable::new(full.outcome.checkpoint.val_f1, &rows);
    table.verify()?;
    if let Some(o) = out {
        table.write_tsv(&o.join("ablation.tsv"))?;
        let json = o.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(&table)? + "\n").map_err(|e| Error::io(&json, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("no-dropout".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn ablation_deltas_are_recomputed() {
        let t = AblationTable::new(
            0.9789,
            &[
                ("no-augmentation".into(), 0.9350),
                ("no-attention".into(), 0.9493),
                ("no-focal-loss".into(), 0.9584),
            ],
        );
        t.verify().unwrap();
        assert_eq!(t.rows[0].delta, 0.0);
        assert!((t.rows[1].delta - -0.0439).abs() < 1e-12);
        assert!((t.rows[2].delta - -0.0296).abs() < 1e-12);
        assert!((t.rows[3].delta - -0.0205).abs() < 1e-12);

        let mut bad = t.clone();
        bad.rows[1].delta = -0.0377;
        assert!(bad.verify().is_err());
        assert_eq!(AblationTable::new(0.9, &[]).rows.len(), 1);
    }

    #[test]
    fn comparison_requires_pairing() {
        let a = Series {
            name: "a".into(),
            seeds: vec![1, 2, 3],
            values: vec![0.9, 0.91, 0.92],
        };
        let mut b = a.clone();
        b.name = "b".into();
        let same = compare_variants(&a, &b).unwrap();
        assert!(same.no_difference && same.wilcoxon.is_none() && same.t_test.is_none());
        assert_eq!(same.deltas, vec![0.0; 3]);

        b.seeds = vec![1, 2, 4];
        assert!(compare_variants(&a, &b).is_err());
        b.seeds = vec![1, 2];
        b.values = vec![0.9, 0.9];
        assert!(compare_variants(&a, &b).is_err());
    }

    #[test]
    fn summary_excludes_and_flags_failures() {
        let report = crate::evaluation::evaluate(
            &[crate::ingest::Label::All, crate::ingest::Label::Hem],
            &[crate::ingest::Label::All, crate::ingest::Label::Hem],
            Some(&[0.9, 0.1]),
        )
        .unwrap();
        let its = vec![
            IterationResult {
                index: 1,
                seed: 11,
                status: IterationStatus::Failed { error: "boom".into() },
            },
            IterationResult {
                index: 0,
                seed: 10,
                status: IterationStatus::Completed { report },
            },
        ];
        let s = MonteCarloSummary::from_iterations("fp".into(), 10, its).unwrap();
        assert!(s.has_failures);
        assert_eq!(s.failed, vec![1]);
        assert_eq!(s.requested, 2);
        assert_eq!(s.metrics["f1"].n, 1);
        assert_eq!(s.metrics["f1"].std, None);
        assert_eq!(s.seeds(), vec![10, 11]);
        assert_eq!(s.series("f1").seeds, vec![10]);
    }
}
