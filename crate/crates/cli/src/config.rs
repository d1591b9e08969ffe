//! Run configuration: one TOML file per run, validated before any work.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use leukonet::experiments::{ExperimentPlan, MonteCarloOptions};
use leukonet::ingest::NamingRule;
use leukonet::model::ModelConfig;
use leukonet::reporting::OverlayStyle;
use leukonet::splitter::SplitTargets;
use leukonet::training::TrainConfig;
use leukonet::transforms::{AugmentPolicy, AugmentTarget};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATA_ROOT_VAR: &str = "LEUKONET_DATA_ROOT";
pub const OUT_ROOT_VAR: &str = "LEUKONET_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub naming: NamingRule,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub visualize: OverlayStyle,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Falls back to `LEUKONET_DATA_ROOT` when absent.
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub seed: u64,
    /// Explicit per-class patient counts.
    pub targets: Option<SplitTargets>,
    /// Training/validation/test fractions, used when `targets` is absent
    /// and the dataset is not the 101-patient one.
    pub fractions: Option<[f64; 3]>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            seed: 42,
            targets: None,
            fractions: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub policy: AugmentPolicy,
    pub target: AugmentTarget,
    pub balance: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            policy: AugmentPolicy::default(),
            target: AugmentTarget::ReplicasOnly,
            balance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub iterations: usize,
    pub base_seed: u64,
    pub workers: usize,
    pub ablation_variants: Vec<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            iterations: 100,
            base_seed: 0,
            workers: 1,
            ablation_variants: vec!["no-augmentation".into(), "no-attention".into(), "no-focal-loss".into()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Falls back to `LEUKONET_OUT_ROOT`, then `runs`.
    pub root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            data: DataSection::default(),
            naming: NamingRule::default(),
            split: SplitSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentSection::default(),
            experiment: ExperimentSection::default(),
            visualize: OverlayStyle::default(),
            output: OutputSection::default(),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tiny: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Applies overrides and fills roots from the environment.
    pub fn resolve(mut self, overrides: &Overrides) -> anyhow::Result<RunConfig> {
        if let Some(seed) = overrides.seed {
            self.split.seed = seed;
            self.train.seed = seed;
            self.augment.policy.rng_seed = seed;
            self.experiment.base_seed = seed;
        }
        if overrides.tiny {
            self.model = ModelConfig {
                attention: self.model.attention,
                se_reduction: self.model.se_reduction,
                ..ModelConfig::tiny()
            };
        }
        if self.data.root.is_none() {
            self.data.root = std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from);
        }
        if self.output.root.is_none() {
            self.output.root = Some(
                std::env::var_os(OUT_ROOT_VAR)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| "runs".into()),
            );
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.policy.validate()?;
        self.visualize.validate()?;
        if self.split.targets.is_some() && self.split.fractions.is_some() {
            bail!("split: give either `targets` or `fractions`, not both");
        }
        if self.experiment.workers == 0 {
            bail!("experiment.workers must be at least 1");
        }
        for v in &self.experiment.ablation_variants {
            v.parse::<leukonet::experiments::Variant>()?;
        }
        if let (Some(data), Some(out)) = (&self.data.root, &self.output.root) {
            let (data, out) = (absolute(data), absolute(out));
            if out.starts_with(&data) {
                bail!(
                    "output root {} lies inside the dataset root {}",
                    out.display(),
                    data.display()
                );
            }
        }
        Ok(())
    }

    pub fn data_root(&self) -> anyhow::Result<&Path> {
        self.data
            .root
            .as_deref()
            .with_context(|| format!("no dataset root: set data.root in the config or {DATA_ROOT_VAR}"))
    }

    pub fn out_root(&self) -> &Path {
        self.output.root.as_deref().unwrap_or(Path::new("runs"))
    }

    pub fn plan(&self, targets: SplitTargets) -> ExperimentPlan {
        ExperimentPlan {
            model: self.model.clone(),
            train: self.train.clone(),
            augment: self.augment.policy.clone(),
            augment_target: self.augment.target,
            balance: self.augment.balance,
            targets,
        }
    }

    pub fn monte_carlo(&self, resume: bool) -> MonteCarloOptions {
        MonteCarloOptions {
            iterations: self.experiment.iterations,
            base_seed: self.experiment.base_seed,
            resume,
            workers: self.experiment.workers,
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_is_enough() {
        let cfg = RunConfig::parse("schema_version = 1\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("schema_version = 1\n[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::parse("schema_version = 1\nextra = 3\n").is_err());
        assert!(RunConfig::parse("schema_version = 2\n").is_err());
        assert!(RunConfig::parse("[train]\nmax_epochs = 3\n").is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("schema_version = 1\n[data]\nroot = \"/data/x\"\n[output]\nroot = \"/tmp/o\"\n")
            .unwrap()
            .resolve(&Overrides {
                seed: Some(7),
                tiny: true,
            })
            .unwrap();
        assert_eq!((cfg.split.seed, cfg.train.seed, cfg.experiment.base_seed), (7, 7, 7));
        assert_eq!(cfg.model.backbone_id, ModelConfig::tiny().backbone_id);
    }

    #[test]
    fn output_inside_data_is_refused() {
        let cfg =
            RunConfig::parse("schema_version = 1\n[data]\nroot = \"/data/x\"\n[output]\nroot = \"/data/x/runs\"\n")
                .unwrap();
        assert!(cfg.resolve(&Overrides::default()).is_err());
    }

    #[test]
    fn bad_values_fail_validation() {
        let cfg = RunConfig::parse("schema_version = 1\n[train]\nmax_epochs = 0\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("schema_version = 1\n[experiment]\nablation_variants = [\"no-dropout\"]\n").unwrap();
        assert!(cfg.validate().is_err());
    }
}
