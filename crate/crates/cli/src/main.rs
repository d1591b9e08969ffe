mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use leukonet::evaluation::{evaluate_rows, read_predictions, write_predictions, MetricsReport};
use leukonet::experiments::{self, compare_variants, run_ablation, run_monte_carlo, run_split, Variant};
use leukonet::ingest::{scan_dataset, summarize, write_manifest, DatasetManifest, Label};
use leukonet::reporting::{attention_heatmap, plot_history, render_report, save_artifact};
use leukonet::splitter::{
    fixed_split, image_count_discrepancies, materialize, read_split, write_split, Split, SplitAssignment, SplitTargets,
};
use leukonet::synthetic::{write_dataset, SyntheticSpec};
use leukonet::training::{self, fingerprint, Checkpoint, EpochHistory, ImageLoader};
use leukonet::transforms::{load_image, AugmentPolicy, AugmentTarget};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "leukonet", version, about = "Leukemic cell classification experiments")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue an interrupted run in the same output directory.
    #[arg(long, global = true)]
    resume: bool,
    /// Use the small test backbone instead of the configured one.
    #[arg(long, global = true)]
    tiny: bool,
    /// Output directory for this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the dataset and write its manifest.
    Ingest,
    /// Assign patients to training/validation/test.
    Split,
    /// Train on the fixed split and evaluate on its test patients.
    Train {
        /// Use a stored split instead of drawing one from the seed.
        #[arg(long)]
        split_file: Option<PathBuf>,
    },
    /// Metrics from a checkpoint or a predictions table.
    Eval(EvalArgs),
    /// Repeated random resplits with retraining.
    Montecarlo {
        /// Also run this variant on the same seeds and compare paired F1.
        #[arg(long)]
        compare: Option<String>,
    },
    /// Train the full model and each ablation variant on the fixed split.
    Ablate {
        /// Variants to run; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Attention heatmaps and overlays for images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to render; one ALL and one HEM image from the dataset when omitted.
        images: Vec<PathBuf>,
    },
    /// Figures and a markdown summary for a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a generated two-class dataset for smoke runs.
    Synth(SynthArgs),
    /// Print the default configuration, which documents every key.
    Defaults,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Validation,
    Test,
}

impl From<Subset> for Split {
    fn from(s: Subset) -> Split {
        match s {
            Subset::Validation => Split::Validation,
            Subset::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Stored predictions (`image_id`, `label`, `prediction`, optional `score_all`).
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split used with the checkpoint; defaults to `split.tsv` beside it.
    #[arg(long)]
    split_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    subset: Subset,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 24)]
    all_patients: usize,
    #[arg(long, default_value_t = 16)]
    hem_patients: usize,
    #[arg(long, default_value_t = 15)]
    images_per_patient: usize,
    #[arg(long, default_value_t = 64)]
    size: u32,
}

/// Failure classes, reported with distinct exit codes.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    fn report(&self) -> ExitCode {
        let (kind, err, code) = match self {
            Failure::Config(e) => ("config", e, 2),
            Failure::Run(e) => ("run", e, 1),
        };
        let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
        let msg = serde_json::json!({ "status": "error", "kind": kind, "message": chain.join(": ") });
        let _ = writeln!(std::io::stderr(), "{msg}");
        ExitCode::from(code)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let raw = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    raw.resolve(&Overrides {
        seed: cli.seed,
        tiny: cli.tiny,
    })
    .map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml().map_err(Failure::Run)?);
            return Ok(());
        }
        Command::Report { run } => return report(run).map_err(Failure::Run),
        Command::Synth(args) => return synth(&cli, args).map_err(Failure::Run),
        _ => {}
    }
    let cfg = load_config(&cli)?;
    let name = match &cli.command {
        Command::Ingest => "ingest",
        Command::Split => "split",
        Command::Train { .. } => "train",
        Command::Eval(_) => "eval",
        Command::Montecarlo { .. } => "montecarlo",
        Command::Ablate { .. } => "ablate",
        Command::Visualize { .. } => "visualize",
        _ => unreachable!("handled above"),
    };
    let fp = fingerprint(&cfg).map_err(|e| Failure::Run(e.into()))?;
    let dir = cli
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_root().join(format!("{name}-{}", &fp[..12])));
    let fresh = !dir.exists();
    if !fresh && !cli.resume && dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        log::warn!("{} already has content; files will be overwritten", dir.display());
    }

    let result = (|| -> anyhow::Result<()> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
        match &cli.command {
            Command::Ingest => ingest(&cfg, &dir),
            Command::Split => split(&cfg, &dir),
            Command::Train { split_file } => train(&cfg, &dir, split_file.as_deref()),
            Command::Eval(args) => eval(&cfg, &dir, args),
            Command::Montecarlo { compare } => montecarlo(&cfg, &dir, cli.resume, compare.as_deref()),
            Command::Ablate { variants } => ablate(&cfg, &dir, variants.as_deref()),
            Command::Visualize { checkpoint, images } => visualize(&cfg, &dir, checkpoint, images),
            _ => unreachable!("handled above"),
        }
    })();
    if let Err(e) = result {
        if fresh || !cli.resume {
            match quarantine(&dir) {
                Ok(moved) => log::error!("partial outputs moved to {}", moved.display()),
                Err(q) => log::error!("could not quarantine {}: {q}", dir.display()),
            }
        }
        return Err(Failure::Run(e));
    }
    println!("outputs: {}", dir.display());
    Ok(())
}

/// Moves a failed run's directory under a sibling `failed/` directory.
fn quarantine(dir: &Path) -> anyhow::Result<PathBuf> {
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = dir
        .file_name()
        .context("run directory has no name")?
        .to_string_lossy()
        .into_owned();
    let failed = parent.join("failed");
    fs::create_dir_all(&failed)?;
    let mut target = failed.join(&name);
    let mut n = 1;
    while target.exists() {
        target = failed.join(format!("{name}.{n}"));
        n += 1;
    }
    fs::rename(dir, &target)?;
    Ok(target)
}

fn manifest(cfg: &RunConfig) -> anyhow::Result<DatasetManifest> {
    let root = cfg.data_root()?;
    scan_dataset(root, &cfg.naming).with_context(|| format!("scanning {}", root.display()))
}

fn targets(cfg: &RunConfig, m: &DatasetManifest) -> anyhow::Result<SplitTargets> {
    Ok(match (&cfg.split.targets, cfg.split.fractions) {
        (Some(t), _) => *t,
        (None, Some(f)) => SplitTargets::proportional(m, f)?,
        (None, None) => SplitTargets::default(),
    })
}

fn fixed(cfg: &RunConfig, m: &DatasetManifest) -> anyhow::Result<(SplitTargets, SplitAssignment)> {
    let t = targets(cfg, m)?;
    let s = fixed_split(m, &t, cfg.split.seed)?;
    Ok((t, s))
}

fn print_metrics(title: &str, m: &MetricsReport) {
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    println!("{title} (n = {})", m.n_samples);
    println!("  accuracy     {}", pct(m.accuracy));
    println!(
        "  precision    {} (weighted) {} (macro)",
        pct(m.weighted.precision),
        pct(m.macro_avg.precision)
    );
    println!(
        "  recall       {} (weighted) {} (macro)",
        pct(m.weighted.recall),
        pct(m.macro_avg.recall)
    );
    println!(
        "  f1           {} (weighted) {} (macro)",
        pct(m.weighted.f1),
        pct(m.macro_avg.f1)
    );
    println!("  sensitivity  {}", pct(m.sensitivity));
    println!("  specificity  {}", pct(m.specificity));
    println!("  auc          {}", m.auc.map(pct).unwrap_or_else(|| "n/a".into()));
    for w in &m.warnings {
        println!("  warning: {w}");
    }
}

fn ingest(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    write_manifest(&m, &dir.join("manifest.tsv"))?;
    let s = summarize(&m);
    fs::write(
        dir.join("dataset_summary.json"),
        serde_json::to_string_pretty(&s)? + "\n",
    )?;
    for label in Label::BOTH {
        let c = s.class(label);
        println!("{label}: {} patients, {} images", c.patients, c.images);
    }
    println!("total: {} patients, {} images", s.total_patients, s.total_images);
    Ok(())
}

fn split(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let (_, s) = fixed(cfg, &m)?;
    write_split(&s, &dir.join("split.tsv"))?;
    for part in Split::ALL {
        let c = s.counts(part);
        println!(
            "{part}: ALL {} patients / {} images, HEM {} patients / {} images",
            c.class(Label::All).patients,
            c.class(Label::All).images,
            c.class(Label::Hem).patients,
            c.class(Label::Hem).images
        );
    }
    if cfg.split.targets.is_none() && cfg.split.fractions.is_none() {
        for d in image_count_discrepancies(&s) {
            log::warn!("{d}");
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig, dir: &Path, split_file: Option<&Path>) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let (t, s) = match split_file {
        Some(f) => (targets(cfg, &m)?, read_split(f, &m)?),
        None => fixed(cfg, &m)?,
    };
    let run = run_split(&m, &s, &cfg.plan(t), Some(dir))?;
    plot_history(&run.outcome.history, &dir.join("figures"))?;
    let h = &run.outcome.history;
    println!(
        "trained {} epoch(s){}; selected epoch {}",
        h.epochs.len(),
        if h.stopped_early { " (early stop)" } else { "" },
        run.outcome.checkpoint.epoch
    );
    print_metrics("validation", &run.outcome.val_report);
    if let Some(r) = &run.test_report {
        print_metrics("test", r);
    }
    Ok(())
}

fn eval(cfg: &RunConfig, dir: &Path, args: &EvalArgs) -> anyhow::Result<()> {
    let report = if let Some(p) = &args.predictions {
        evaluate_rows(&read_predictions(p)?)?
    } else {
        let ck_path = args.checkpoint.as_ref().context("give --predictions or --checkpoint")?;
        let ck = Checkpoint::load(ck_path)?;
        let split_file = match &args.split_file {
            Some(f) => f.clone(),
            None => ck_path.with_file_name(experiments::files::SPLIT),
        };
        let m = manifest(cfg)?;
        let s = read_split(&split_file, &m).with_context(|| format!("reading {}", split_file.display()))?;
        let parts = materialize(&m, &s)?;
        let subset: Split = args.subset.into();
        let model = ck.restore()?;
        let mut loader = ImageLoader::new(ck.model.input_size, AugmentPolicy::identity(), AugmentTarget::None);
        let preds = training::predict(&model, &parts.get(subset).records, subset, &mut loader, &cfg.train)?;
        write_predictions(&preds.rows, &dir.join("predictions.tsv"))?;
        preds.report()?
    };
    report.write_json(&dir.join("metrics.json"))?;
    print_metrics("evaluation", &report);
    Ok(())
}

fn montecarlo(cfg: &RunConfig, dir: &Path, resume: bool, compare: Option<&str>) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let plan = cfg.plan(targets(cfg, &m)?);
    let variant = compare.map(str::parse::<Variant>).transpose()?;
    let opts = cfg.monte_carlo(resume);
    let summary = run_monte_carlo(&m, &plan, &opts, dir)?;
    print_summary("full model", &summary);
    if let Some(v) = variant {
        let other = run_monte_carlo(&m, &v.apply(&plan), &opts, &dir.join(v.name()))?;
        print_summary(v.name(), &other);
        let mut a = other.series("f1");
        a.name = v.name().into();
        let mut b = summary.series("f1");
        b.name = "full".into();
        // keep only seeds both runs completed
        let keep: Vec<u64> = a.seeds.iter().copied().filter(|s| b.seeds.contains(s)).collect();
        for s in [&mut a, &mut b] {
            let (seeds, values) = s
                .seeds
                .iter()
                .zip(&s.values)
                .filter(|(x, _)| keep.contains(x))
                .map(|(x, y)| (*x, *y))
                .unzip();
            (s.seeds, s.values) = (seeds, values);
        }
        let c = compare_variants(&a, &b)?;
        fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&c)? + "\n")?;
        println!(
            "full - {}: mean F1 delta {:+.4} over {} paired iterations",
            v.name(),
            c.mean_delta,
            c.deltas.len()
        );
        match (&c.wilcoxon, &c.t_test) {
            _ if c.no_difference => println!("no difference: every paired delta is zero"),
            (Some(w), t) => {
                println!("  wilcoxon signed-rank p = {:.3e} ({:?})", w.p_value, w.method);
                if let Some(t) = t {
                    println!("  paired t-test p = {:.3e}", t.p_value);
                }
            }
            (None, _) => {}
        }
    }
    Ok(())
}

fn print_summary(title: &str, s: &experiments::MonteCarloSummary) {
    println!("{title}: {} iteration(s), {} failed", s.requested, s.failed.len());
    for (name, m) in &s.metrics {
        let std = m
            .std
            .map(|v| format!("{:.2}", 100.0 * v))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "  {name:<12} {:.2} ± {std} [{:.2}, {:.2}]",
            100.0 * m.mean,
            100.0 * m.ci_low,
            100.0 * m.ci_high
        );
    }
}

fn ablate(cfg: &RunConfig, dir: &Path, variants: Option<&[String]>) -> anyhow::Result<()> {
    let m = manifest(cfg)?;
    let (t, s) = fixed(cfg, &m)?;
    let names = variants.unwrap_or(&cfg.experiment.ablation_variants);
    let table = run_ablation(&m, &s, &cfg.plan(t), names, Some(dir))?;
    println!("{:<18} {:>8} {:>9}", "configuration", "val F1", "delta");
    for r in &table.rows {
        println!("{:<18} {:>7.2}% {:>+8.2}pp", r.name, 100.0 * r.val_f1, 100.0 * r.delta);
    }
    Ok(())
}

fn visualize(cfg: &RunConfig, dir: &Path, checkpoint: &Path, images: &[PathBuf]) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.restore()?;
    let chosen: Vec<(String, PathBuf)> = if images.is_empty() {
        let m = manifest(cfg)?;
        Label::BOTH
            .iter()
            .map(|&l| {
                m.records()
                    .iter()
                    .find(|r| r.label == l)
                    .map(|r| (l.as_str().to_lowercase(), r.path.clone()))
                    .with_context(|| format!("no {l} image in the dataset"))
            })
            .collect::<anyhow::Result<_>>()?
    } else {
        images
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let stem = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| i.to_string());
                (stem, p.clone())
            })
            .collect()
    };
    for (stem, path) in chosen {
        let img = load_image(&path)?;
        let a = attention_heatmap(&model, &img, &cfg.visualize)?;
        let written = save_artifact(&a, dir, &stem, &cfg.visualize)?;
        println!(
            "{}: predicted {} (p_ALL = {:.3}) -> {}",
            path.display(),
            a.prediction,
            a.score_all,
            written[0].display()
        );
    }
    Ok(())
}

fn report(run: &Path) -> anyhow::Result<()> {
    let history = run.join(experiments::files::HISTORY_JSON);
    if history.exists() {
        plot_history(&EpochHistory::read_json(&history)?, &run.join("figures"))?;
    }
    let text = render_report(run)?;
    let out = run.join("report.md");
    fs::write(&out, &text)?;
    print!("{text}");
    println!("written: {}", out.display());
    Ok(())
}

fn synth(cli: &Cli, args: &SynthArgs) -> anyhow::Result<()> {
    let Some(out) = &cli.out else {
        bail!("synth needs --out");
    };
    let spec = SyntheticSpec {
        all_patients: args.all_patients,
        hem_patients: args.hem_patients,
        images_per_patient: args.images_per_patient,
        size: args.size,
        seed: cli.seed.unwrap_or(0),
        ..SyntheticSpec::default()
    };
    let n = write_dataset(out, &spec)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}
