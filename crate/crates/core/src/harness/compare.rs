use serde::{Deserialize, Serialize};

use super::record::{EvalPoint, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Candidate minus baseline final accuracy.
    pub conv_diff: f64,
    /// Baseline over candidate time-to-target; absent when the candidate never
    /// reaches the baseline's final accuracy.
    pub speedup: Option<f64>,
    pub outperforms: bool,
}

/// Logical time of the first evaluation at or above `target`.
pub fn time_to_target(eval: &[EvalPoint], target: f64) -> Option<f64> {
    eval.iter().find(|p| p.accuracy >= target).map(|p| p.time)
}

pub fn compare_runs(baseline: &RunSummary, candidate: &RunSummary) -> Comparison {
    let target = baseline.final_metric;
    let speedup = match (time_to_target(&baseline.eval, target), time_to_target(&candidate.eval, target)) {
        (Some(b), Some(c)) if c > 0.0 => Some(b / c),
        (Some(_), Some(_)) => Some(f64::INFINITY),
        _ => None,
    };
    let conv_diff = candidate.final_metric - baseline.final_metric;
    Comparison {
        conv_diff,
        speedup,
        outperforms: speedup.is_some() && conv_diff >= 0.0,
    }
}
