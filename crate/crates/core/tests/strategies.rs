mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use selsync::harness::{build_streams, run_experiment, ExperimentConfig, RunOptions, RunOutcome};
use selsync::numeric::{forward_backward, init_params, sgd_step, FlatVector, ParamVector};
use selsync::runtime::SlowWorker;
use selsync::strategy::{participant_count, AggMode, StepDecision, StrategyConfig};

fn run(cfg: &ExperimentConfig) -> RunOutcome {
    run_experiment(cfg, None, RunOptions { record_trajectory: true }).unwrap()
}

/// Plain single-process SGD over worker 0's stream; returns the parameters
/// before each step followed by the final ones.
fn sequential_sgd(cfg: &ExperimentConfig, steps: u64) -> Vec<ParamVector> {
    let cfg = cfg.resolved();
    let (train, _) = cfg.load_data().unwrap();
    let mut stream = build_streams(&cfg, Arc::new(train)).unwrap().remove(0);
    let mut p = init_params(&cfg.model).unwrap();
    let mut out = vec![p.clone()];
    for step in 0..steps {
        let batch = stream.next_batch(cfg.batch).unwrap();
        let (_, g) = forward_backward(&p, &batch, &cfg.model).unwrap();
        p = sgd_step(&p, &g, cfg.lr.lr_at(step, 0)).unwrap();
        out.push(p.clone());
    }
    out
}

#[test]
fn one_worker_bsp_is_sequential_sgd() {
    for agg in [AggMode::Parameter, AggMode::Gradient] {
        let cfg = small(bsp(agg), 1, 40);
        let seq = sequential_sgd(&cfg, 40);
        let out = run(&cfg);
        let traj = &out.handle.workers[0].trajectory;
        for (step, p) in traj.iter().enumerate() {
            assert_eq!(p.as_slice(), seq[step + 1].values(), "{agg:?} step {step}");
        }
    }
}

#[test]
fn one_worker_ssp_never_blocks_and_is_sequential_sgd() {
    let cfg = small(StrategyConfig::Ssp { s: 1 }, 1, 40);
    let seq = sequential_sgd(&cfg, 40);
    let out = run(&cfg);
    assert_eq!(out.handle.ps.global.values(), seq[40].values());
    assert_eq!(out.handle.ps.ssp.deferred, 0);
    // The replica holds the pulled model the step's gradient was taken at.
    for (step, p) in out.handle.workers[0].trajectory.iter().enumerate() {
        assert_eq!(p.as_slice(), seq[step].values());
    }
}

#[test]
fn bsp_gradient_and_parameter_aggregation_agree() {
    let pa = run(&small(bsp(AggMode::Parameter), 4, 100));
    let ga = run(&small(bsp(AggMode::Gradient), 4, 100));
    for (a, b) in pa.handle.workers.iter().zip(&ga.handle.workers) {
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert!(max_abs_diff(x, y) <= 1e-9);
        }
    }
    assert_eq!(pa.summary.lssr, Some(0.0));
    assert_eq!(ga.summary.steps_bsp, 100);
}

#[test]
fn selsync_at_zero_delta_tracks_bsp() {
    let bsp_run = run(&small(bsp(AggMode::Parameter), 4, 120));
    let sel = run(&small(selsync(0.0, AggMode::Parameter), 4, 120));
    for (a, b) in bsp_run.handle.workers.iter().zip(&sel.handle.workers) {
        for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
            assert!(max_abs_diff(x, y) <= 1e-9);
        }
    }
    assert_eq!(sel.summary.lssr, Some(0.0));
    assert!((sel.summary.final_metric - bsp_run.summary.final_metric).abs() <= 1e-6);
}

#[test]
fn huge_delta_never_syncs_after_warmup() {
    for agg in [AggMode::Parameter, AggMode::Gradient] {
        let out = run(&small(selsync(1e9, agg), 4, 150));
        assert_eq!(out.summary.lssr_post_warmup, Some(1.0));
        assert_eq!(out.summary.steps_bsp, 25);
        assert!(out.handle.ps.rounds.iter().all(|r| r.step < 25));
    }
}

fn by_step(out: &RunOutcome) -> BTreeMap<u64, Vec<(StepDecision, Option<f64>)>> {
    let mut m: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for r in &out.records {
        m.entry(r.step).or_default().push((r.decision, r.delta_g));
    }
    m
}

#[test]
fn selsync_is_all_or_none() {
    let delta = 0.05;
    for agg in [AggMode::Parameter, AggMode::Gradient] {
        let out = run(&small(selsync(delta, agg), 4, 200));
        let mut forced = 0;
        for (step, recs) in by_step(&out) {
            assert!(recs.iter().all(|r| r.0 == recs[0].0), "split decision at step {step}");
            let below = recs.iter().any(|r| r.1.is_some_and(|d| d < delta));
            if step >= 25 && recs[0].0 == StepDecision::Sync && below {
                forced += 1;
            }
        }
        assert!(forced > 0, "no step where one worker pulled the others into a sync");
        let mut digests: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for w in &out.handle.workers {
            for &(step, d) in &w.sync_digests {
                digests.entry(step).or_default().push(d);
            }
        }
        assert!(!digests.is_empty());
        let mut differ_after_sync = 0;
        for (step, ds) in digests {
            assert_eq!(ds.len(), 4);
            let same = ds.iter().all(|&d| d == ds[0]);
            match agg {
                AggMode::Parameter => assert!(same, "replicas differ after sync at {step}"),
                // A mean gradient applied to drifted replicas keeps them apart.
                AggMode::Gradient => differ_after_sync += usize::from(!same),
            }
        }
        if agg == AggMode::Gradient {
            assert!(differ_after_sync > 0);
        }
    }
}

#[test]
fn fedavg_rounds_follow_the_schedule() {
    let mut cfg = small(StrategyConfig::FedAvg { c: 0.5, e: 0.25 }, 4, 0);
    // 600 samples / (4 x 8) = 19 steps per epoch, 4 rounds each.
    cfg.budget = selsync::harness::Budget::Epochs(3);
    let out = run(&cfg);
    assert_eq!(out.steps_per_epoch, 19);
    let rounds = &out.handle.ps.rounds;
    assert_eq!(rounds.len(), 12);
    for r in rounds {
        let mut p = r.pushers.clone();
        p.dedup();
        assert_eq!(p.len(), participant_count(0.5, 4));
    }
    for w in &out.handle.workers {
        assert_eq!(w.sync_digests.len(), 12);
        assert_eq!(w.sync_digests, out.handle.workers[0].sync_digests);
    }
}

#[test]
fn fedavg_full_participation_every_step_is_bsp() {
    let mut cfg = small(StrategyConfig::FedAvg { c: 1.0, e: 1.0 / 19.0 }, 4, 57);
    cfg.budget = selsync::harness::Budget::Steps(57);
    let fed = run(&cfg);
    let b = run(&small(bsp(AggMode::Parameter), 4, 57));
    for (x, y) in fed.handle.workers.iter().zip(&b.handle.workers) {
        assert_eq!(x.trajectory, y.trajectory);
    }
}

#[test]
fn ssp_slow_worker_finishes_last_in_steps() {
    let mut cfg = small(StrategyConfig::Ssp { s: 5 }, 4, 300);
    cfg.cluster.slow_workers = vec![SlowWorker { worker: 0, factor: 2.0 }];
    let out = run(&cfg);
    let steps: Vec<usize> = out.handle.workers.iter().map(|w| w.records.len()).collect();
    assert!(steps[1..].iter().all(|&s| s > steps[0]), "{steps:?}");
    assert!(out.handle.ps.ssp.max_spread <= 5);
    assert_eq!(out.handle.ps.ssp.violations, 0);
    assert!(out.handle.ps.ssp.deferred > 0, "the gate never engaged");
}

#[test]
fn injection_batches_have_the_expected_size() {
    let mut cfg = small(selsync(0.2, AggMode::Parameter), 4, 30);
    cfg.partitioning = selsync::harness::Partitioning::Noniid { labels_per_worker: 1 };
    cfg.injection = Some(selsync::harness::InjectionRates { alpha: 0.5, beta: 0.5 });
    cfg.batch = 16;
    let out = run(&cfg);
    // b' = round(16 / 2) = 8; two donors of ceil(0.5 * 8) = 4 rows each.
    assert_eq!(out.handle.ps.relayed_shares, 30 * 2);
    let share_payload = 8 + 4 * (4 + 4 * 8);
    let k = selsync::runtime::Kind::DataShare.index();
    for w in &out.handle.workers {
        let sent = w.stats.frames_sent[k];
        assert_eq!(w.stats.frames_received[k] + sent, 30 * 2);
        assert_eq!(w.stats.payload_sent[k], sent * share_payload);
    }
}
