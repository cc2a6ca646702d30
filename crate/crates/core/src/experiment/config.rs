use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackerRole;
use crate::data::{
    load_idx, load_series_csv, partition, synth_classification_with, synth_series_with,
    ClassificationStyle, ClientShard, Dataset, PartitionMode, PartitionSpec, SeriesStyle,
};
use crate::error::{Error, Result};
use crate::nn::SplitModelSpec;
use crate::presets::{preset, PRESET_NAMES};
use crate::protocol::{LedgerOptions, SchemeConfig, Seeds};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Gaussian-blob images; `samples` train plus `test_samples` held out.
    SynthImage {
        samples: usize,
        test_samples: usize,
        classes: usize,
        shape: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        separation: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pixel_noise: Option<f64>,
    },
    SynthSeries {
        samples: usize,
        test_samples: usize,
        classes: usize,
        length: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<f64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `limit` training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    SeriesCsv {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    #[serde(flatten)]
    pub mode: PartitionMode,
    pub client_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeedConfig {
    #[serde(default)]
    pub data: u64,
    #[serde(default)]
    pub init: u64,
    #[serde(default)]
    pub scheduler: u64,
    #[serde(default)]
    pub attack: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default = "client_role")]
    pub attacker_role: AttackerRole,
    #[serde(default)]
    pub attacker_client: usize,
    /// Defaults to every client.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub victims: Option<Vec<usize>>,
    /// Server attacker only: black-box queries drawn from the test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_budget: Option<usize>,
    #[serde(default)]
    pub decoder: DecoderConfig,
    /// Reconstructions written as PGM per victim (images only).
    #[serde(default)]
    pub dump_images: usize,
}

fn client_role() -> AttackerRole {
    AttackerRole::Client
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    #[serde(default)]
    pub deterministic: bool,
    /// Keep smashed-data payloads in the ledger (needed by `attack`).
    #[serde(default)]
    pub verbose_ledger: bool,
    /// Epochs whose payloads survive in a verbose ledger, counted from the end.
    #[serde(default = "one")]
    pub payload_epochs: usize,
    #[serde(default = "yes")]
    pub eval_every_epoch: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            deterministic: false,
            verbose_ledger: false,
            payload_epochs: 1,
            eval_every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub scheme: SchemeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub run: RunOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Train and test splits of a configured dataset.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub partition: PartitionSpec,
    pub split: SplitModelSpec,
}

impl ExperimentConfig {
    /// The default toy experiment: 2000 synthetic 16x16 images, 10 classes,
    /// 6 balanced clients, tiny-conv2.
    pub fn toy(scheme: SchemeConfig) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::SynthImage {
                samples: 2000,
                test_samples: 500,
                classes: 10,
                shape: vec![1, 16, 16],
                separation: None,
                pixel_noise: None,
            },
            partition: PartitionConfig {
                mode: PartitionMode::Balanced,
                client_count: 6,
            },
            model: ModelConfig {
                preset: "tiny-conv2".into(),
            },
            scheme,
            attack: None,
            seeds: SeedConfig::default(),
            run: RunOptions::default(),
            output_dir: None,
        }
    }

    /// Parses JSON; errors name the offending field path and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." {
                "config".to_string()
            } else {
                path
            };
            Error::config(field, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("--config", format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies a `KEY=VALUE` seed override (`data`, `init`, `scheduler`, `attack`).
    pub fn override_seed(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::config(
                "--seed-override",
                format!("expected KEY=VALUE, got `{assignment}`"),
            )
        })?;
        let key = key.trim().trim_start_matches("seeds.");
        let value: u64 = value.trim().parse().map_err(|_| {
            Error::config(
                format!("seeds.{key}"),
                format!("`{value}` is not an unsigned integer"),
            )
        })?;
        let slot = match key {
            "data" => &mut self.seeds.data,
            "init" => &mut self.seeds.init,
            "scheduler" => &mut self.seeds.scheduler,
            "attack" => &mut self.seeds.attack,
            other => {
                return Err(Error::config(
                    format!("seeds.{other}"),
                    "unknown seed, expected data, init, scheduler or attack",
                ))
            }
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        match &self.dataset {
            DatasetConfig::SynthImage {
                samples,
                test_samples,
                classes,
                shape,
                separation,
                pixel_noise,
            } => {
                check_counts(*samples, *test_samples, *classes)?;
                if shape.len() != 3 || shape.contains(&0) {
                    return Err(Error::config(
                        "dataset.shape",
                        format!("expected nonzero [C, H, W], got {shape:?}"),
                    ));
                }
                if separation.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
                    return Err(Error::config("dataset.separation", "must be positive"));
                }
                if pixel_noise.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
                    return Err(Error::config("dataset.pixel_noise", "must be nonnegative"));
                }
            }
            DatasetConfig::SynthSeries {
                samples,
                test_samples,
                classes,
                length,
                noise,
            } => {
                check_counts(*samples, *test_samples, *classes)?;
                if *length < 8 {
                    return Err(Error::config("dataset.length", "must be at least 8"));
                }
                if noise.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
                    return Err(Error::config("dataset.noise", "must be nonnegative"));
                }
            }
            DatasetConfig::Idx { limit, .. } => {
                if *limit == Some(0) {
                    return Err(Error::config("dataset.limit", "must be at least 1"));
                }
            }
            DatasetConfig::SeriesCsv { .. } => {}
        }
        if !PRESET_NAMES.contains(&self.model.preset.as_str()) {
            return Err(Error::config(
                "model.preset",
                format!(
                    "unknown preset `{}`, expected one of {PRESET_NAMES:?}",
                    self.model.preset
                ),
            ));
        }
        let classes = match &self.dataset {
            DatasetConfig::SynthImage { classes, .. }
            | DatasetConfig::SynthSeries { classes, .. } => *classes,
            _ => usize::MAX,
        };
        self.partition_spec().validate(classes)?;
        self.scheme.validate(self.partition.client_count)?;
        if let Some(a) = &self.attack {
            let n = self.partition.client_count;
            if a.attacker_client >= n {
                return Err(Error::config(
                    "attack.attacker_client",
                    format!("client {} does not exist ({n} clients)", a.attacker_client),
                ));
            }
            if let Some(v) = a.victims.as_ref().and_then(|v| v.iter().find(|&&v| v >= n)) {
                return Err(Error::config(
                    "attack.victims",
                    format!("client {v} does not exist ({n} clients)"),
                ));
            }
            if a.victims.as_ref().is_some_and(Vec::is_empty) {
                return Err(Error::config("attack.victims", "empty victim list"));
            }
            match (a.attacker_role, a.query_budget) {
                (AttackerRole::Server, None | Some(0)) => {
                    return Err(Error::config(
                        "attack.query_budget",
                        "a server attacker needs a positive query budget",
                    ))
                }
                (AttackerRole::Client, Some(_)) => {
                    return Err(Error::config(
                        "attack.query_budget",
                        "only valid for a server attacker",
                    ))
                }
                _ => {}
            }
            let d = a.decoder;
            if d.epochs == 0 || d.batch_size == 0 {
                return Err(Error::config(
                    "attack.decoder",
                    "epochs and batch_size must be at least 1",
                ));
            }
            if !(d.learning_rate.is_finite() && d.learning_rate > 0.0) {
                return Err(Error::config(
                    "attack.decoder.learning_rate",
                    "must be positive",
                ));
            }
        }
        if self.run.verbose_ledger && self.run.payload_epochs == 0 {
            return Err(Error::config("run.payload_epochs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            mode: self.partition.mode.clone(),
            client_count: self.partition.client_count,
            seed: self.seeds.data,
        }
    }

    pub fn protocol_seeds(&self) -> Seeds {
        Seeds {
            init: self.seeds.init,
            scheduler: self.seeds.scheduler,
        }
    }

    pub fn ledger_options(&self) -> LedgerOptions {
        LedgerOptions {
            verbose: self.run.verbose_ledger,
            payload_epochs: self.run.verbose_ledger.then_some(self.run.payload_epochs),
        }
    }

    /// Train and test datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let seed = self.seeds.data;
        match &self.dataset {
            DatasetConfig::SynthImage {
                samples,
                test_samples,
                classes,
                shape,
                separation,
                pixel_noise,
            } => {
                let mut style = ClassificationStyle::default();
                if let Some(s) = separation {
                    style.separation = *s;
                }
                if let Some(n) = pixel_noise {
                    style.pixel_noise = *n;
                }
                let all = synth_classification_with(
                    samples + test_samples,
                    *classes,
                    shape,
                    seed,
                    &style,
                )?;
                all.split_at(*samples)
            }
            DatasetConfig::SynthSeries {
                samples,
                test_samples,
                classes,
                length,
                noise,
            } => {
                let mut style = SeriesStyle::default();
                if let Some(n) = noise {
                    style.noise = *n;
                }
                let all =
                    synth_series_with(samples + test_samples, *classes, *length, seed, &style)?;
                all.split_at(*samples)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                if let Some(l) = limit {
                    if *l < train.len() {
                        train = train.split_at(*l)?.0;
                    }
                }
                Ok((train, load_idx(test_images, test_labels)?))
            }
            DatasetConfig::SeriesCsv { train, test } => {
                Ok((load_series_csv(train)?, load_series_csv(test)?))
            }
        }
    }

    /// Loads data, partitions it and builds the model.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let (train, test) = self.datasets()?;
        let spec = self.partition_spec();
        let shards = partition(&train, &spec)?;
        let split = preset(&self.model.preset, train.sample_shape(), train.class_count)?;
        Ok(Prepared {
            train,
            test,
            shards,
            partition: spec,
            split,
        })
    }
}

fn check_counts(samples: usize, test_samples: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::config("dataset.classes", "must be at least 2"));
    }
    if samples < classes {
        return Err(Error::config(
            "dataset.samples",
            format!("{samples} samples cannot cover {classes} classes"),
        ));
    }
    if test_samples == 0 {
        return Err(Error::config("dataset.test_samples", "must be at least 1"));
    }
    Ok(())
}
