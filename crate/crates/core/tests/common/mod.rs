#![allow(dead_code)]

use selsync::harness::{Budget, DatasetSource, ExperimentConfig, Partitioning, Seeds};
use selsync::numeric::{Activation, LrSchedule, ModelSpec};
use selsync::runtime::{ClusterConfig, CostModel, TransportConfig};
use selsync::strategy::{AggMode, StrategyConfig};

pub fn selsync(delta: f64, agg: AggMode) -> StrategyConfig {
    StrategyConfig::SelSync {
        delta,
        agg,
        warmup: 25,
        lambda: None,
    }
}

pub fn bsp(agg: AggMode) -> StrategyConfig {
    StrategyConfig::Bsp { agg }
}

/// Small two-class blobs with an 8-unit MLP.
pub fn small(strategy: StrategyConfig, workers: usize, steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec::mlp(4, 8, 3, Activation::Tanh, 0),
        dataset: DatasetSource::Blobs {
            num_classes: 3,
            per_class: 200,
            test_per_class: 50,
            dim: 4,
        },
        partitioning: Partitioning::Seldp,
        injection: None,
        strategy,
        cluster: ClusterConfig::sim(workers, 0),
        batch: 8,
        lr: LrSchedule::constant(0.05),
        budget: Budget::Steps(steps),
        eval_every: 10,
        seeds: Seeds {
            data: 11,
            init: 12,
            schedule: 13,
            participants: 14,
            injection: 15,
        },
        costs: CostModel::default(),
        patience: None,
    }
}

pub fn with_schedule_seed(mut cfg: ExperimentConfig, seed: u64) -> ExperimentConfig {
    cfg.seeds.schedule = seed;
    cfg
}

pub fn with_sockets(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.cluster.transport = TransportConfig::Sockets {
        ps_address: "127.0.0.1:0".into(),
        base_port: 0,
    };
    cfg
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
