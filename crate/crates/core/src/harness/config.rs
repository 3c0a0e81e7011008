use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_blobs, read_csv, Dataset, Split};
use crate::numeric::{LrSchedule, ModelSpec};
use crate::runtime::{ClusterConfig, CostModel, TransportConfig};
use crate::strategy::StrategyConfig;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Gaussian blobs; the test split uses a seed derived from the data seed.
    Blobs {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
    },
    /// CSV files with JSON sidecars.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Partitioning {
    Defdp,
    Seldp,
    Noniid { labels_per_worker: usize },
}

/// Injection rates; the base batch is the experiment's `batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionRates {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(u64),
    Epochs(u64),
}

/// The five named seeds. Every random stream in a run derives from one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub schedule: u64,
    pub participants: u64,
    pub injection: u64,
}

fn default_patience() -> Option<usize> {
    Some(10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSource,
    pub partitioning: Partitioning,
    #[serde(default)]
    pub injection: Option<InjectionRates>,
    pub strategy: StrategyConfig,
    pub cluster: ClusterConfig,
    pub batch: usize,
    pub lr: LrSchedule,
    pub budget: Budget,
    pub eval_every: u64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub costs: CostModel,
    /// Evaluations without a new best accuracy before the run is cut short.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
}

/// Sub-seed paths under `seeds.data`.
pub(crate) mod data_stream {
    pub const TEST_SPLIT: u64 = 1;
    pub const LABEL_ASSIGNMENT: u64 = 2;
    pub const CHUNK_SHUFFLE: u64 = 3;
    pub const BATCH_ORDER: u64 = 4;
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copies the named seeds into the places that consume them.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.model.init_seed = self.seeds.init;
        if let TransportConfig::DeterministicSim { schedule_seed, .. } = &mut cfg.cluster.transport {
            *schedule_seed = self.seeds.schedule;
        }
        cfg
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cluster.validate()?;
        self.lr.validate()?;
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Epochs(0)) {
            return Err(Error::config("budget must be at least one step"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience must be positive when set"));
        }
        if let Some(inj) = self.injection {
            if !matches!(self.partitioning, Partitioning::Noniid { .. }) {
                return Err(Error::config("data injection is only allowed with non-IID partitioning"));
            }
            if self.strategy.is_async() {
                return Err(Error::config("data injection needs a lockstep strategy"));
            }
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !unit(inj.alpha) || !unit(inj.beta) {
                return Err(Error::config("injection alpha and beta must lie in [0, 1]"));
            }
        }
        if let Partitioning::Noniid { labels_per_worker: 0 } = self.partitioning {
            return Err(Error::config("labels_per_worker must be positive"));
        }
        if let DatasetSource::Blobs { num_classes, per_class, test_per_class, dim } = self.dataset {
            if num_classes == 0 || per_class == 0 || test_per_class == 0 || dim == 0 {
                return Err(Error::config("blob dataset sizes must be positive"));
            }
        }
        Ok(())
    }

    /// Train and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match &self.dataset {
            DatasetSource::Blobs {
                num_classes,
                per_class,
                test_per_class,
                dim,
            } => {
                let train = generate_blobs(*num_classes, *per_class, *dim, self.seeds.data)?;
                let test_seed = seed::derive(self.seeds.data, &[data_stream::TEST_SPLIT]);
                let test = generate_blobs(*num_classes, *test_per_class, *dim, test_seed)?.with_split(Split::Test);
                (train, test)
            }
            DatasetSource::Files { train, test } => (read_csv(train)?, read_csv(test)?),
        };
        for d in [&train, &test] {
            if d.dim() != self.model.input_dim || d.num_classes() != self.model.num_classes {
                return Err(Error::Dimension(format!(
                    "dataset is {}-dimensional with {} classes, model expects {} and {}",
                    d.dim(),
                    d.num_classes(),
                    self.model.input_dim,
                    self.model.num_classes
                )));
            }
        }
        if test.is_empty() {
            return Err(Error::config("test split is empty"));
        }
        Ok((train, test))
    }

    /// `ceil(|train| / (N * b))`.
    pub fn steps_per_epoch(&self, train_len: usize) -> u64 {
        (train_len as u64).div_ceil((self.cluster.workers * self.batch) as u64).max(1)
    }

    pub fn total_steps(&self, steps_per_epoch: u64) -> u64 {
        match self.budget {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => e * steps_per_epoch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
        "model": {"input_dim": 2, "hidden_dims": [8], "num_classes": 2},
        "dataset": {"kind": "blobs", "num_classes": 2, "per_class": 50, "test_per_class": 20, "dim": 2},
        "partitioning": {"kind": "seldp"},
        "strategy": {"kind": "selsync", "delta": 0.3},
        "cluster": {"N": 2, "transport": {"kind": "deterministic_sim"}},
        "batch": 8,
        "lr": {"initial_lr": 0.1},
        "budget": {"steps": 20},
        "eval_every": 5,
        "seeds": {"data": 1, "init": 2, "schedule": 3}
    }"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_json(SAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.patience, Some(10));
        assert_eq!(cfg.costs, CostModel::default());
        let r = cfg.resolved();
        assert_eq!(r.model.init_seed, 2);
        assert_eq!(
            r.cluster.transport,
            TransportConfig::DeterministicSim { schedule_seed: 3, latency: 0.0 }
        );
        let (train, test) = r.load_data().unwrap();
        assert_eq!((train.len(), test.len()), (100, 40));
        assert_eq!(r.steps_per_epoch(train.len()), 7);
    }

    #[test]
    fn validation_failures() {
        let base = ExperimentConfig::from_json(SAMPLE).unwrap();
        let mut c = base.clone();
        c.budget = Budget::Steps(0);
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.injection = Some(InjectionRates { alpha: 0.5, beta: 0.5 });
        assert!(c.validate().is_err());
        c.partitioning = Partitioning::Noniid { labels_per_worker: 1 };
        assert!(c.validate().is_ok());
        c.strategy = StrategyConfig::Ssp { s: 3 };
        assert!(c.validate().is_err());

        let mut c = base;
        c.model.input_dim = 3;
        assert!(c.load_data().is_err());
    }
}
