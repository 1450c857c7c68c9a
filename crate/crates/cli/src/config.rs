//! Experiment configuration: strict-schema JSON in, fully resolved values out.
//!
//! Every field has a default, so an empty object `{}` is the stock benchmark;
//! unknown keys anywhere in the tree are rejected rather than ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cil_core::clad::{Measurement, RdPairing, Strategy};
use cil_core::data::CollisionSpec;
use cil_core::metrics::Aggregation;
use cil_core::model::ModelConfig;
use cil_core::num::Rng;
use cil_core::train::TrainConfig;
use cil_core::{Error, Result};

/// Synthetic benchmark description: Gaussian clusters around unit prototypes,
/// with selected class pairs placed at an engineered cosine similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub noise_sigma: f64,
    /// Seeds prototype directions and sample noise; independent of the
    /// replicate seeds so every replicate sees the same dataset.
    pub data_seed: u64,
    pub collisions: Vec<CollisionSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 20,
            dim: 32,
            n_train_per_class: 200,
            n_test_per_class: 100,
            noise_sigma: 0.15,
            data_seed: 7,
            collisions: benchmark_collisions(),
        }
    }
}

/// Train/test CSV paths, `label,f0,f1,…` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Exactly one source must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub csv: Option<CsvPaths>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticSpec::default()),
            csv: None,
        }
    }
}

/// Class-order shuffle and task sizes: `base_size` classes first, then
/// `increment` per later task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub base_size: usize,
    pub increment: usize,
    pub shuffle_seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            base_size: 10,
            increment: 5,
            shuffle_seed: 1993,
        }
    }
}

/// Post-run analysis knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Label permutations behind the reported p value.
    pub permutations: usize,
    /// Headline aggregation; both variants are always computed and emitted.
    pub aggregation: Aggregation,
    pub correlation_seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            permutations: 10_000,
            aggregation: Aggregation::Max,
            correlation_seed: 17,
        }
    }
}

/// Root of the config tree handed to every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Replay budget per class; 0 disables replay entirely.
    pub exemplars_per_class: usize,
    pub normalize_herding: bool,
    /// Root seeds, one full run each.
    pub replicate_seeds: Vec<u64>,
    /// Ablation sweeps use this many of `replicate_seeds` (from the front).
    pub ablation_replicates: usize,
    pub analysis: AnalysisConfig,
    /// Default output location; `--out` and the env var override it.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            exemplars_per_class: 20,
            normalize_herding: true,
            replicate_seeds: vec![0, 1, 2, 3, 4],
            ablation_replicates: 3,
            analysis: AnalysisConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "data.synthetic and data.csv are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of data.synthetic or data.csv is required".into(),
                ))
            }
            _ => {}
        }
        if let Some(spec) = &self.data.synthetic {
            if spec.n_classes == 0 {
                return Err(Error::NoClasses);
            }
            if self.model.input_dim != spec.dim {
                return Err(Error::Config(format!(
                    "model input_dim {} does not match data dim {}",
                    self.model.input_dim, spec.dim
                )));
            }
            for c in &spec.collisions {
                if c.new_class >= spec.n_classes || c.old_class >= spec.n_classes {
                    return Err(Error::Config(format!(
                        "collision pair ({}, {}) exceeds class range 0..{}",
                        c.new_class, c.old_class, spec.n_classes
                    )));
                }
            }
            // Split arithmetic is fully checkable up front for synthetic data.
            check_split(&self.split, spec.n_classes)?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.replicate_seeds.is_empty() {
            return Err(Error::Config("replicate_seeds must not be empty".into()));
        }
        if self.ablation_replicates == 0 {
            return Err(Error::Config("ablation_replicates must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Seeds used by ablation sweeps.
    pub fn ablation_seeds(&self) -> &[u64] {
        let k = self.ablation_replicates.min(self.replicate_seeds.len());
        &self.replicate_seeds[..k]
    }
}

fn check_split(split: &SplitConfig, n_classes: usize) -> Result<()> {
    if split.base_size == 0 || split.base_size > n_classes {
        return Err(Error::Config(format!(
            "base_size {} must be in 1..={n_classes}",
            split.base_size
        )));
    }
    let rest = n_classes - split.base_size;
    if rest > 0 {
        if split.increment == 0 {
            return Err(Error::Config("increment must be ≥ 1".into()));
        }
        if rest % split.increment != 0 {
            return Err(Error::Config(format!(
                "{rest} post-base classes do not divide into increments of {}",
                split.increment
            )));
        }
    }
    Ok(())
}

/// The class order the task splitter will realize for this seed, so configs
/// can be phrased in terms of task membership.
pub fn class_order(n_classes: usize, shuffle_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_classes).collect();
    let mut rng = Rng::stream(shuffle_seed, "shuffle", &[]);
    rng.shuffle(&mut order);
    order
}

/// Stock collision set: four later-task classes placed at cosine 0.9 against
/// four distinct base-task classes, chosen after the class-order shuffle so
/// the pairs genuinely straddle the base boundary under the default split.
pub fn benchmark_collisions() -> Vec<CollisionSpec> {
    let split = SplitConfig::default();
    let order = class_order(20, split.shuffle_seed);
    let new = [order[10], order[11], order[15], order[16]];
    let old = [order[0], order[1], order[2], order[3]];
    new.iter()
        .zip(old)
        .map(|(&n, o)| CollisionSpec {
            new_class: n,
            old_class: o,
            target_cosine: 0.9,
        })
        .collect()
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Baseline selector for the `--method` flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Replay only: forces η to 0.
    Naive,
    /// Leaves the configured loss composition untouched.
    Clad,
}

/// Command-line field overrides, applied after the config file loads.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub eta: Option<f64>,
    pub proportion: Option<f64>,
    pub strategy: Option<Strategy>,
    pub exemplars: Option<usize>,
    pub seed: Option<u64>,
    pub measurement: Option<Measurement>,
    pub rd_pairing: Option<RdPairing>,
}

impl Overrides {
    /// `--method` applies first; the specific flags win over it.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if self.method == Some(Method::Naive) {
            cfg.train.eta = 0.0;
        }
        if let Some(eta) = self.eta {
            cfg.train.eta = eta;
        }
        if let Some(p) = self.proportion {
            cfg.train.proportion = p;
        }
        if let Some(s) = self.strategy {
            cfg.train.strategy = s;
        }
        if let Some(r) = self.exemplars {
            cfg.exemplars_per_class = r;
        }
        if let Some(seed) = self.seed {
            cfg.replicate_seeds = vec![seed];
        }
        if let Some(m) = self.measurement {
            cfg.train.measurement = m;
        }
        if let Some(rp) = self.rd_pairing {
            cfg.train.rd_pairing = rp;
        }
    }
}

pub fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "top" => Ok(Strategy::Top),
        "smallest" => Ok(Strategy::Smallest),
        "random" => Ok(Strategy::Random),
        _ => Err(Error::Config(format!(
            "unknown strategy '{s}' (expected top, smallest, or random)"
        ))),
    }
}

pub fn parse_measurement(s: &str) -> Result<Measurement> {
    match s {
        "logits" => Ok(Measurement::Logits),
        "cosine" => Ok(Measurement::Cosine),
        "oracle_logits" => Ok(Measurement::OracleLogits),
        _ => Err(Error::Config(format!(
            "unknown measurement '{s}' (expected logits, cosine, or oracle_logits)"
        ))),
    }
}

pub fn parse_rd_pairing(s: &str) -> Result<RdPairing> {
    match s {
        "text" => Ok(RdPairing::Text),
        "literal" => Ok(RdPairing::Literal),
        _ => Err(Error::Config(format!(
            "unknown rd-pairing '{s}' (expected text or literal)"
        ))),
    }
}

pub fn parse_method(s: &str) -> Result<Method> {
    match s {
        "naive" => Ok(Method::Naive),
        "clad" => Ok(Method::Clad),
        _ => Err(Error::Config(format!(
            "unknown method '{s}' (expected naive or clad)"
        ))),
    }
}
