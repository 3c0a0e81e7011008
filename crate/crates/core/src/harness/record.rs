use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::signal::{replay_decision, Decision, DeltaThreshold};
use crate::strategy::StepDecision;
use crate::{Error, Result};

/// One row per (step, worker).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub worker_id: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub ewma: f64,
    /// Relative change of the smoothed squared gradient norm; null when undefined.
    pub delta_g: Option<f64>,
    pub decision: StepDecision,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Logical time spent in the step.
    pub step_duration: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    /// Logical time when the evaluated model was formed.
    pub time: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub workers: usize,
    pub total_steps: u64,
    pub steps_local: u64,
    pub steps_bsp: u64,
    /// Null for SSP, which has neither local nor barrier steps.
    pub lssr: Option<f64>,
    /// Null when LSSR is 1 (no synchronization at all) or undefined.
    pub comm_reduction: Option<f64>,
    pub warmup_steps: u64,
    pub lssr_post_warmup: Option<f64>,
    /// Test accuracy of the final evaluated model.
    pub final_metric: f64,
    pub best_metric: f64,
    pub final_loss: f64,
    /// Logical time of the slowest worker at the end of the run.
    pub wall_time: f64,
    pub total_bytes: u64,
    pub stopped_early: bool,
    pub eval: Vec<EvalPoint>,
    /// Real seconds spent running; not part of any determinism guarantee.
    pub elapsed_secs: f64,
}

/// Local-to-synchronous step ratio.
pub fn lssr(steps_local: u64, steps_bsp: u64) -> Result<f64> {
    if steps_local + steps_bsp == 0 {
        return Err(Error::Undefined("LSSR of a run with no steps"));
    }
    Ok(steps_local as f64 / (steps_local + steps_bsp) as f64)
}

/// `1 / (1 - lssr)`; infinite when every step was local.
pub fn comm_reduction(lssr: f64) -> f64 {
    if lssr >= 1.0 {
        f64::INFINITY
    } else {
        1.0 / (1.0 - lssr)
    }
}

/// Cluster-level decision per step: a step is synchronous if any worker
/// recorded it as such.
pub fn step_decisions(records: &[MetricsRecord]) -> BTreeMap<u64, StepDecision> {
    let mut out = BTreeMap::new();
    for r in records {
        out.entry(r.step)
            .and_modify(|d| {
                if r.decision == StepDecision::Sync {
                    *d = StepDecision::Sync;
                }
            })
            .or_insert(r.decision);
    }
    out
}

/// `(steps_local, steps_bsp)` over steps `>= from`.
pub fn count_decisions(records: &[MetricsRecord], from: u64) -> (u64, u64) {
    let mut local = 0;
    let mut bsp = 0;
    for (&step, &d) in &step_decisions(records) {
        if step < from {
            continue;
        }
        match d {
            StepDecision::Sync => bsp += 1,
            StepDecision::Local | StepDecision::Async => local += 1,
        }
    }
    (local, bsp)
}

/// Sync-step count for each δ when a recorded Δ trace is replayed through the
/// threshold rule. A step syncs if any worker's replayed decision is sync.
pub fn replay_trace(records: &[MetricsRecord], deltas: &[f64], warmup: u64) -> Result<Vec<(f64, u64)>> {
    let mut by_step: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
    for r in records {
        by_step.entry(r.step).or_default().push(r.delta_g);
    }
    deltas
        .iter()
        .map(|&d| {
            let thr = DeltaThreshold::new(d)?;
            let syncs = by_step
                .iter()
                .filter(|(&step, vals)| {
                    vals.iter()
                        .any(|&v| replay_decision(v, step < warmup, thr) == Decision::Sync)
                })
                .count() as u64;
            Ok((d, syncs))
        })
        .collect()
}

pub fn read_jsonl(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, worker: usize, decision: StepDecision, delta: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            step,
            worker_id: worker,
            loss: 1.0,
            grad_norm_sq: 1.0,
            ewma: 1.0,
            delta_g: delta,
            decision,
            bytes_sent: 10,
            bytes_received: 20,
            step_duration: 1.0,
            lr: 0.1,
        }
    }

    #[test]
    fn lssr_values() {
        assert_eq!(lssr(0, 10).unwrap(), 0.0);
        assert_eq!(lssr(10, 0).unwrap(), 1.0);
        assert_eq!(lssr(9000, 1000).unwrap(), 0.9);
        assert!(matches!(lssr(0, 0), Err(Error::Undefined(_))));
    }

    #[test]
    fn comm_reduction_values() {
        assert!((comm_reduction(0.9) - 10.0).abs() < 1e-12);
        assert_eq!(comm_reduction(0.0), 1.0);
        assert_eq!(comm_reduction(0.5), 2.0);
        assert_eq!(comm_reduction(1.0), f64::INFINITY);
    }

    #[test]
    fn any_sync_makes_the_step_sync() {
        let records = vec![
            rec(0, 0, StepDecision::Sync, None),
            rec(0, 1, StepDecision::Sync, None),
            rec(1, 0, StepDecision::Local, Some(0.1)),
            rec(1, 1, StepDecision::Sync, Some(0.1)),
            rec(2, 0, StepDecision::Local, Some(0.1)),
            rec(2, 1, StepDecision::Local, Some(0.1)),
        ];
        assert_eq!(count_decisions(&records, 0), (1, 2));
        assert_eq!(count_decisions(&records, 1), (1, 1));
    }

    #[test]
    fn replay_counts() {
        let records = vec![
            rec(0, 0, StepDecision::Sync, None),
            rec(1, 0, StepDecision::Sync, Some(0.4)),
            rec(2, 0, StepDecision::Local, Some(0.1)),
            rec(2, 1, StepDecision::Local, Some(0.2)),
        ];
        let counts = replay_trace(&records, &[0.0, 0.15, 0.3, 1.0], 1).unwrap();
        assert_eq!(counts, vec![(0.0, 3), (0.15, 3), (0.3, 2), (1.0, 1)]);
    }

    #[test]
    fn jsonl_round_trip_with_null_delta() {
        let r = rec(3, 1, StepDecision::Async, None);
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"delta_g\":null"));
        assert!(line.contains("\"decision\":\"async\""));
        assert_eq!(read_jsonl(&format!("{line}\n\n")).unwrap(), vec![r]);
    }
}
