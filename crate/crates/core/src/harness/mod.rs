//! Experiment configuration, per-step records, evaluation and run comparison.

mod compare;
mod config;
mod eval;
mod record;
mod run;

pub use compare::{compare_runs, time_to_target, Comparison};
pub use config::{Budget, DatasetSource, ExperimentConfig, InjectionRates, Partitioning, Seeds};
pub use eval::{evaluate, EvalResult};
pub use record::{
    comm_reduction, count_decisions, lssr, read_jsonl, replay_trace, step_decisions, EvalPoint, MetricsRecord,
    RunSummary,
};
pub use run::{build_streams, patience_cut, run_experiment, RunOptions, RunOutcome};
