//! Experiment spec files.
//!
//! A spec is a TOML document. Top-level keys: `seeds` (required, non-empty),
//! `out_dir`, `metric_layer` (`"z"` or `"v"`) and `jobs`. Sections:
//!
//! ```toml
//! seeds = [1, 2, 3]
//! out_dir = "out/demo"
//!
//! [dataset]        # Gaussian blobs, regenerated for every run seed
//! classes = 8
//! dims = 32
//! per_class = 500
//! center_scale = 1.0
//! spread = 0.5
//! test_fraction = 0.2
//!
//! [stack]          # d_in and num_classes come from [dataset]
//! encoder_dims = [64, 64]
//! d_z = 32
//! projector_dims = [32]
//! d_v = 16
//!
//! [pretrain]       # toy instance discrimination
//! epochs = 30
//! tau = 0.5
//! eta = 0.05
//! # noise_sigma defaults to 0.2 * dataset.spread
//! scale_range = [0.8, 1.2]
//! dropout_p = 0.1
//!
//! [train]          # used by `run` and `sweep`, and as defaults for [[methods]]
//! method = "coin"
//! epochs = 60
//! alpha = 0.7
//! eta = 0.05
//! tau = 0.3
//! lambda = 0.1
//! batch_size = 128
//!
//! [[methods]]      # used by `compare`; any [train] key may be overridden
//! method = "ce"
//! ```
//!
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::datagen::{make_blobs, AugmentConfig, Dataset};
use crate::error::{CoinError, Result};
use crate::model::StackConfig;
use crate::pipeline::{FeatureLayer, Method, PretrainConfig, RunOptions, TrainConfig};

/// Offset mixed into a run seed to derive the dataset seed, so data
/// generation and training draw from different streams.
pub const DATA_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    #[serde(default = "one")]
    pub center_scale: f64,
    pub spread: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Fixed dataset seed; when absent each run seed derives its own.
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DatasetSpec {
    pub fn data_seed(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed.wrapping_add(DATA_SEED_OFFSET))
    }

    pub fn generate(&self, run_seed: u64) -> Result<Dataset> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.data_seed(run_seed));
        make_blobs(self.classes, self.dims, self.per_class, self.center_scale, self.spread, &mut rng)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(CoinError::validation("dataset.classes", "must be >= 2"));
        }
        if self.dims == 0 {
            return Err(CoinError::validation("dataset.dims", "must be >= 1"));
        }
        if self.per_class < 2 {
            return Err(CoinError::validation("dataset.per_class", "must be >= 2 so both splits are populated"));
        }
        if !(self.spread > 0.0) {
            return Err(CoinError::validation("dataset.spread", "must be > 0"));
        }
        if !(self.center_scale >= 0.0) {
            return Err(CoinError::validation("dataset.center_scale", "must be >= 0"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CoinError::validation("dataset.test_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct StackSpec {
    encoder_dims: Vec<usize>,
    d_z: usize,
    projector_dims: Vec<usize>,
    d_v: usize,
}

impl Default for StackSpec {
    fn default() -> Self {
        let s = StackConfig::default();
        StackSpec {
            encoder_dims: s.encoder_dims,
            d_z: s.d_z,
            projector_dims: s.projector_dims,
            d_v: s.d_v,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainSpec {
    epochs: Option<usize>,
    tau: Option<f64>,
    eta: Option<f64>,
    batch_size: Option<usize>,
    noise_sigma: Option<f64>,
    scale_range: Option<[f64; 2]>,
    dropout_p: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSpec {
    method: Option<String>,
    epochs: Option<usize>,
    alpha: Option<f64>,
    eta: Option<f64>,
    tau: Option<f64>,
    lambda: Option<f64>,
    batch_size: Option<usize>,
}

impl TrainSpec {
    fn overlay(&self, base: &TrainConfig, field: &str) -> Result<TrainConfig> {
        let method = match &self.method {
            Some(m) => m.parse::<Method>().map_err(|_| {
                CoinError::validation(format!("{field}.method"), format!("unknown method `{m}` (coin, scl, ce)"))
            })?,
            None => base.method,
        };
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            alpha: self.alpha.unwrap_or(base.alpha),
            eta: self.eta.unwrap_or(base.eta),
            tau: self.tau.unwrap_or(base.tau),
            lambda: self.lambda.unwrap_or(base.lambda),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            seed: base.seed,
            method,
        };
        cfg.validate().map_err(|e| match e {
            CoinError::Validation { field: f, message } => CoinError::validation(format!("{field}.{f}"), message),
            other => other,
        })?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    seeds: Vec<u64>,
    out_dir: Option<PathBuf>,
    metric_layer: Option<String>,
    jobs: Option<usize>,
    dataset: DatasetSpec,
    #[serde(default)]
    stack: StackSpec,
    #[serde(default)]
    pretrain: PretrainSpec,
    #[serde(default)]
    train: TrainSpec,
    #[serde(default)]
    methods: Vec<TrainSpec>,
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub dataset: DatasetSpec,
    pub stack: StackConfig,
    pub pretrain: PretrainConfig,
    pub options: RunOptions,
    /// The `[train]` section.
    pub train: TrainConfig,
    /// The `[[methods]]` entries; CE, SCL and COIN over `[train]` when absent.
    pub methods: Vec<TrainConfig>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoinError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "spec".to_string());
            CoinError::validation(field, e.to_string().trim().replace('\n', " "))
        })?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawSpec) -> Result<Self> {
        if raw.seeds.is_empty() {
            return Err(CoinError::validation("seeds", "at least one seed is required"));
        }
        if raw.jobs == Some(0) {
            return Err(CoinError::validation("jobs", "must be >= 1"));
        }
        raw.dataset.validate()?;
        let stack = StackConfig {
            d_in: raw.dataset.dims,
            encoder_dims: raw.stack.encoder_dims.clone(),
            d_z: raw.stack.d_z,
            projector_dims: raw.stack.projector_dims.clone(),
            d_v: raw.stack.d_v,
            num_classes: raw.dataset.classes,
        };
        stack.validate().map_err(|e| match e {
            CoinError::Validation { field, message } => CoinError::validation(format!("stack.{field}"), message),
            other => other,
        })?;

        let defaults = PretrainConfig::for_spread(raw.dataset.spread);
        let p = &raw.pretrain;
        let pretrain = PretrainConfig {
            epochs: p.epochs.unwrap_or(defaults.epochs),
            tau: p.tau.unwrap_or(defaults.tau),
            eta: p.eta.unwrap_or(defaults.eta),
            batch_size: p.batch_size.or(raw.train.batch_size).unwrap_or(defaults.batch_size),
            augment: AugmentConfig {
                noise_sigma: p.noise_sigma.unwrap_or(defaults.augment.noise_sigma),
                scale_range: p.scale_range.unwrap_or(defaults.augment.scale_range),
                dropout_p: p.dropout_p.unwrap_or(defaults.augment.dropout_p),
            },
        };
        pretrain.validate().map_err(|e| match e {
            CoinError::Validation { field, message } => CoinError::validation(format!("pretrain.{field}"), message),
            CoinError::BatchSize { .. } => CoinError::validation("pretrain.batch_size", "must be >= 2"),
            other => other,
        })?;

        let metric_layer = match raw.metric_layer.as_deref() {
            None => FeatureLayer::Z,
            Some(s) => s
                .parse()
                .map_err(|_| CoinError::validation("metric_layer", format!("expected `z` or `v`, got `{s}`")))?,
        };

        let train = raw.train.overlay(&TrainConfig::default(), "train")?;
        let methods = if raw.methods.is_empty() {
            [Method::Ce, Method::Scl, Method::Coin]
                .into_iter()
                .map(|method| TrainConfig { method, ..train.clone() })
                .collect()
        } else {
            raw.methods
                .iter()
                .enumerate()
                .map(|(i, m)| m.overlay(&train, &format!("methods[{i}]")))
                .collect::<Result<Vec<_>>>()?
        };

        let test_fraction = raw.dataset.test_fraction;
        Ok(ExperimentSpec {
            seeds: raw.seeds,
            out_dir: raw.out_dir,
            jobs: raw.jobs,
            dataset: raw.dataset,
            stack,
            pretrain,
            options: RunOptions {
                test_fraction,
                metric_layer,
            },
            train,
            methods,
        })
    }
}
