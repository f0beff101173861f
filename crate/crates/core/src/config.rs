//! Run configuration: one TOML file holding every hyperparameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationConfig;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, Regime};
use crate::metrics::MetricsConfig;
use crate::model::{hash_json, ModelConfig};
use crate::objective::TrainConfig;
use crate::synthdata::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Generate two-branch scenes instead of the scenario mix.
    #[serde(default)]
    pub bimodal: bool,
    #[serde(default)]
    pub generator: GeneratorConfig,
}

/// Grid swept by the benchmark harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub fusions: Vec<Fusion>,
    pub regimes: Vec<Regime>,
    /// Latent ratios; 1.0 keeps a latent block with as many queries as tokens.
    pub ratios: Vec<f64>,
    pub forward_passes: usize,
    /// Agent rows per timed forward pass.
    pub batch: usize,
    /// Training steps per configuration before scoring.
    pub train_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            fusions: vec![Fusion::Late, Fusion::Early, Fusion::Hierarchical],
            regimes: vec![Regime::MultiAxis],
            ratios: vec![0.25, 0.5, 1.0],
            forward_passes: 30,
            batch: 32,
            train_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub aggregate: AggregationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Uses `seed` for data generation, initialization and batching.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.generator.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.aggregate.validate()?;
        self.metrics.validate()?;
        self.data.generator.validate()?;
        if self.data.train_scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::Config("train_scenes and eval_scenes must be positive".into()));
        }
        if self.model.decoder.future_steps != self.data.generator.future_steps {
            return Err(Error::Config(format!(
                "decoder predicts {} steps but scenes have {}",
                self.model.decoder.future_steps, self.data.generator.future_steps
            )));
        }
        if self.bench.forward_passes == 0 || self.bench.batch == 0 {
            return Err(Error::Config("bench forward_passes and batch must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}
