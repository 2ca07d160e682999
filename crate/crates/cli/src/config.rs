//! Run configuration: profile defaults overlaid with a TOML file and flags.

use std::path::PathBuf;

use calidrop::active::AcquisitionFunction;
use calidrop::dropout::{DropoutSpec, DropoutVariant};
use calidrop::ensemble::DEFAULT_MC_SAMPLES;
use calidrop::resnet::ResNetConfig;
use calidrop::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Desk scale: 10k CIFAR-10 training images, 60 epochs.
    Mini,
    /// The full recipe: 45k/5k split, 250 epochs.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// The CIFAR-10 binary distribution directory.
    Cifar10,
    Synthetic,
}

/// Class-prototype images; see `SyntheticImageSpec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBlock {
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub noise: f64,
    pub max_blend: f64,
    pub ambiguous_fraction: f64,
    pub task_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub stratified: bool,
    pub mean_subtract: bool,
    pub synthetic: SyntheticBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub final_fc_dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    pub mc_samples: usize,
    pub bins: usize,
    pub bootstrap_reps: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlBlock {
    pub initial_labeled: usize,
    pub acquire_per_round: usize,
    pub rounds: usize,
    pub repeats: usize,
    pub mc_samples: usize,
    pub acquisitions: Vec<AcquisitionFunction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub variants: Vec<DropoutVariant>,
    pub rates: Vec<f64>,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub precision: Precision,
    pub seed: u64,
    pub dataset: DatasetBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub dropout: DropoutSpec,
    pub eval: EvalBlock,
    pub al: AlBlock,
    pub sweep: SweepBlock,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let paper = profile == Profile::Paper;
        Self {
            profile,
            precision: Precision::F32,
            seed: 0,
            dataset: DatasetBlock {
                source: DataSource::Cifar10,
                path: Some(PathBuf::from("data/cifar-10-batches-bin")),
                train_size: if paper { 45_000 } else { 9_000 },
                val_size: if paper { 5_000 } else { 1_000 },
                test_size: if paper { 10_000 } else { 2_000 },
                stratified: true,
                mean_subtract: true,
                synthetic: SyntheticBlock {
                    num_classes: 10,
                    shape: [3, 32, 32],
                    noise: 1.0,
                    max_blend: 0.45,
                    ambiguous_fraction: 0.0,
                    task_seed: 0,
                },
            },
            model: ModelBlock {
                stage_channels: vec![16, 32, 64],
                blocks_per_stage: 2,
                final_fc_dropout_rate: 0.1,
            },
            train: if paper {
                TrainConfig {
                    epochs: 250,
                    lr_drop_epochs: vec![125, 190],
                    ..TrainConfig::default()
                }
            } else {
                TrainConfig::default()
            },
            dropout: DropoutSpec::new(DropoutVariant::Element, 0.1).expect("valid"),
            eval: EvalBlock {
                mc_samples: DEFAULT_MC_SAMPLES,
                bins: calidrop::calibration::DEFAULT_BINS,
                bootstrap_reps: 200,
                batch_size: 256,
            },
            al: AlBlock {
                initial_labeled: if paper { 2_000 } else { 500 },
                acquire_per_round: if paper { 1_000 } else { 250 },
                rounds: if paper { 8 } else { 4 },
                repeats: if paper { 5 } else { 3 },
                mc_samples: DEFAULT_MC_SAMPLES,
                acquisitions: vec![
                    AcquisitionFunction::MaxEntropy,
                    AcquisitionFunction::Bald,
                    AcquisitionFunction::VariationRatio,
                    AcquisitionFunction::Random,
                ],
            },
            sweep: SweepBlock {
                variants: vec![
                    DropoutVariant::Element,
                    DropoutVariant::Block,
                    DropoutVariant::Channel,
                    DropoutVariant::Layer,
                ],
                rates: calidrop::training::default_rates(if paper { 0.5 } else { 0.3 }),
                repeats: 1,
            },
        }
    }

    /// Resolves profile defaults, then the file, then `--seed`. The profile
    /// is taken from the flag, else the file's `profile` key, else `mini`.
    /// `train.seed` follows the top-level seed unless the file sets it.
    pub fn resolve(file: Option<&str>, profile: Option<Profile>, seed: Option<u64>) -> Result<Self, CliError> {
        let overlay: toml::Table = match file {
            Some(text) => text.parse()?,
            None => toml::Table::new(),
        };
        let profile = match profile {
            Some(p) => p,
            None => match overlay.get("profile") {
                Some(v) => v.clone().try_into()?,
                None => Profile::Mini,
            },
        };
        let mut merged = toml::Table::try_from(Self::defaults(profile))?;
        merge(&mut merged, overlay.clone());
        merged.insert("profile".into(), toml::Value::try_from(profile)?);
        let mut cfg: RunConfig = toml::Value::Table(merged).try_into()?;
        let train_seed_given = overlay
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("seed"));
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if seed.is_some() || !train_seed_given {
            cfg.train.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if self.eval.mc_samples == 0 || self.eval.bins == 0 || self.eval.batch_size == 0 {
            return Err(CliError::Usage("eval.mc_samples, eval.bins and eval.batch_size must be positive".into()));
        }
        if self.sweep.repeats == 0 {
            return Err(CliError::Usage("sweep.repeats must be positive".into()));
        }
        self.train.validate()?;
        self.dropout.validate()?;
        Ok(())
    }

    /// Network architecture for data of the given shape and class count.
    pub fn resnet(&self, dropout: DropoutSpec, input_shape: [usize; 3], num_classes: usize) -> ResNetConfig {
        ResNetConfig {
            stage_channels: self.model.stage_channels.clone(),
            blocks_per_stage: self.model.blocks_per_stage,
            num_classes,
            input_shape,
            dropout,
            final_fc_dropout_rate: self.model.final_fc_dropout_rate,
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        Ok(toml::to_string(self)?)
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_profile_defaults() {
        let cfg = RunConfig::resolve(None, None, None).unwrap();
        assert_eq!(cfg, RunConfig::defaults(Profile::Mini));
        let paper = RunConfig::resolve(Some("profile = \"paper\""), None, None).unwrap();
        assert_eq!(paper.train.epochs, 250);
        assert_eq!(paper.al.initial_labeled + paper.al.rounds * paper.al.acquire_per_round, 10_000);
    }

    #[test]
    fn flag_profile_wins_over_file() {
        let cfg = RunConfig::resolve(Some("profile = \"paper\""), Some(Profile::Mini), None).unwrap();
        assert_eq!(cfg.profile, Profile::Mini);
        assert_eq!(cfg.train.epochs, 60);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["colour = 1", "[train]\nepochz = 3", "[dataset.synthetic]\nwidth = 3"] {
            assert!(matches!(RunConfig::resolve(Some(text), None, None), Err(CliError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn seed_flows_into_training() {
        let cfg = RunConfig::resolve(Some("seed = 5"), None, None).unwrap();
        assert_eq!(cfg.train.seed, 5);
        let pinned = RunConfig::resolve(Some("seed = 5\n[train]\nseed = 9\nepochs = 3\nlr_drop_epochs = [1]"), None, None).unwrap();
        assert_eq!((pinned.seed, pinned.train.seed), (5, 9));
        let flag = RunConfig::resolve(Some("seed = 5\n[train]\nseed = 9"), None, Some(11)).unwrap();
        assert_eq!((flag.seed, flag.train.seed), (11, 11));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::resolve(Some("[dropout]\nvariant = \"block\"\nrate = 0.2\nblock_size = 5"), None, Some(4)).unwrap();
        let again = RunConfig::resolve(Some(&cfg.to_toml().unwrap()), None, None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::resolve(Some("[dropout]\nvariant = \"element\"\nrate = 1.5"), None, None).is_err());
        assert!(RunConfig::resolve(Some("[eval]\nmc_samples = 0"), None, None).is_err());
    }
}
