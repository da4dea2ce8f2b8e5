//! Experiment configuration: a TOML file describing the dataset, the
//! architectures, the embedding scheme, and an optional attack. Unknown keys
//! are rejected so typos fail loudly instead of silently falling back to
//! defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::datasets::DatasetName;
use crate::error::{Error, Result};
use crate::modelzoo::ArchName;
use crate::pipelines::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Usp,
    Csp,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Usp => "usp",
            Scheme::Csp => "csp",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "usp" => Ok(Scheme::Usp),
            "csp" => Ok(Scheme::Csp),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}' (expected usp or csp)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Finetune,
    Prune,
    PruneRetrain,
    Distill,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::Finetune => "finetune",
            AttackKind::Prune => "prune",
            AttackKind::PruneRetrain => "prune_retrain",
            AttackKind::Distill => "distill",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(AttackKind::Finetune),
            "prune" => Ok(AttackKind::Prune),
            "prune_retrain" => Ok(AttackKind::PruneRetrain),
            "distill" => Ok(AttackKind::Distill),
            other => Err(Error::Config(format!(
                "unknown attack '{other}' (expected finetune, prune, prune_retrain, or distill)"
            ))),
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `[experiment]`: what to run and where.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub scheme: Scheme,
    pub dataset: DatasetName,
    pub arch: ArchName,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

/// `[signal]`: the customized perturbation (CSP only).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    pub gamma: f32,
    pub zero_fraction: f64,
    pub seed: u64,
    pub use_label_filter: bool,
}

impl Default for SignalSection {
    fn default() -> Self {
        SignalSection {
            gamma: 2.0,
            zero_fraction: 0.2,
            seed: 0,
            use_label_filter: false,
        }
    }
}

/// `[attack]`: the removal attack to evaluate, if any.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    /// Fraction of the training split available to the attacker.
    #[serde(default = "default_data_fraction")]
    pub data_fraction: f64,
    /// Pruning attacks: fraction of weights zeroed.
    #[serde(default = "default_sparsity")]
    pub sparsity: f32,
    /// Distillation: student architecture (defaults to the victim's).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_arch: Option<ArchName>,
    #[serde(default = "default_distill_temperature")]
    pub temperature: f32,
    /// Distillation: weight on the hard-label cross-entropy term.
    #[serde(default = "default_hard_weight")]
    pub hard_weight: f32,
    #[serde(default)]
    pub train: AttackConfig,
}

impl AttackSection {
    /// A section with every field at its default, as if the config had
    /// contained only `kind`. Used when the attack is chosen on the command
    /// line instead of in the file.
    pub fn with_kind(kind: AttackKind) -> Self {
        AttackSection {
            kind,
            data_fraction: default_data_fraction(),
            sparsity: default_sparsity(),
            student_arch: None,
            temperature: default_distill_temperature(),
            hard_weight: default_hard_weight(),
            train: AttackConfig::default(),
        }
    }
}

fn default_data_fraction() -> f64 {
    0.5
}

fn default_sparsity() -> f32 {
    0.8
}

fn default_distill_temperature() -> f32 {
    4.0
}

fn default_hard_weight() -> f32 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub signal: SignalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSection>,
}

impl ExperimentConfig {
    /// Parses and validates a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.name.is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        self.train.validate().map_err(config_err)?;
        if !(self.signal.gamma.is_finite() && self.signal.gamma >= 0.0) {
            return Err(Error::Config("signal gamma must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.signal.zero_fraction) {
            return Err(Error::Config("signal zero_fraction must be in [0, 1)".into()));
        }
        let flat_arch = self.experiment.arch == ArchName::MlpSmall;
        let flat_data = self.experiment.dataset == DatasetName::Synth5;
        if flat_arch != flat_data {
            return Err(Error::Config(format!(
                "dataset {} and architecture {} disagree on input layout \
                 (flat features vs images)",
                self.experiment.dataset,
                self.experiment.arch.as_str()
            )));
        }
        if let Some(attack) = &self.attack {
            attack.train.validate().map_err(config_err)?;
            if !(0.0 < attack.data_fraction && attack.data_fraction <= 1.0) {
                return Err(Error::Config("attack data_fraction must be in (0, 1]".into()));
            }
            if !(0.0..1.0).contains(&attack.sparsity) {
                return Err(Error::Config("attack sparsity must be in [0, 1)".into()));
            }
            if attack.temperature <= 0.0 {
                return Err(Error::Config("attack temperature must be positive".into()));
            }
            if !(0.0..=1.0).contains(&attack.hard_weight) {
                return Err(Error::Config("attack hard_weight must be in [0, 1]".into()));
            }
            if let Some(student) = attack.student_arch {
                let student_flat = student == ArchName::MlpSmall;
                if student_flat != flat_arch {
                    return Err(Error::Config(
                        "student architecture input layout differs from the victim's".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// A fast, self-contained configuration: synthetic blobs and the small
    /// MLP. Suitable for smoke tests and CI.
    pub fn desk_default(name: &str, scheme: Scheme) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                name: name.to_string(),
                scheme,
                dataset: DatasetName::Synth5,
                arch: ArchName::MlpSmall,
                seed: 0,
                data_dir: default_data_dir(),
            },
            train: TrainConfig {
                epochs: 20,
                finetune_epochs: 5,
                batch_size: 64,
                lr: 0.05,
                ..Default::default()
            },
            signal: SignalSection::default(),
            attack: None,
        }
    }

    /// The paper-scale preset: CIFAR data, 100 epochs, batch 512.
    pub fn paper_scale(name: &str, scheme: Scheme, dataset: DatasetName, arch: ArchName) -> Self {
        ExperimentConfig {
            experiment: ExperimentSection {
                name: name.to_string(),
                scheme,
                dataset,
                arch,
                seed: 0,
                data_dir: default_data_dir(),
            },
            train: TrainConfig {
                epochs: 100,
                finetune_epochs: 20,
                batch_size: 512,
                lr: 0.1,
                ..Default::default()
            },
            signal: SignalSection::default(),
            attack: None,
        }
    }
}

fn config_err(e: Error) -> Error {
    Error::Config(e.to_string())
}
