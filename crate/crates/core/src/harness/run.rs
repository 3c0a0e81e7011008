use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use super::config::{data_stream, ExperimentConfig, Partitioning};
use super::eval::evaluate;
use super::record::{comm_reduction, count_decisions, lssr, EvalPoint, MetricsRecord, RunSummary};
use crate::data::{
    adjusted_batch, plan_defdp, plan_noniid, plan_seldp, split_chunks, BatchStream, Dataset, InjectionConfig,
    NonIidSpec, WorkerShard,
};
use crate::numeric::{FlatVector, ModelSpec, ParamVector};
use crate::runtime::{start_cluster, InjectionSetup, RunHandle, RunPlan, Snapshot};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep every worker's parameters after every step.
    pub record_trajectory: bool,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    /// Sorted by `(step, worker_id)`; truncated at the early-stop point.
    pub records: Vec<MetricsRecord>,
    pub handle: RunHandle,
    pub steps_per_epoch: u64,
}

/// One stream per worker for the configured partitioning.
pub fn build_streams(cfg: &ExperimentConfig, train: Arc<Dataset>) -> Result<Vec<BatchStream>> {
    let n = cfg.cluster.workers;
    let stream_seed = seed::derive(cfg.seeds.data, &[data_stream::BATCH_ORDER]);
    let shards: Vec<WorkerShard> = match cfg.partitioning {
        Partitioning::Defdp | Partitioning::Seldp => {
            let split = Arc::new(split_chunks(
                &train,
                n,
                seed::derive(cfg.seeds.data, &[data_stream::CHUNK_SHUFFLE]),
            )?);
            (0..n)
                .map(|w| {
                    let plan = if cfg.partitioning == Partitioning::Defdp {
                        plan_defdp(w, n)?
                    } else {
                        plan_seldp(w, n)?
                    };
                    Ok(WorkerShard::Chunks {
                        plan,
                        split: split.clone(),
                    })
                })
                .collect::<Result<_>>()?
        }
        Partitioning::Noniid { labels_per_worker } => {
            let spec = NonIidSpec {
                labels_per_worker,
                assignment_seed: seed::derive(cfg.seeds.data, &[data_stream::LABEL_ASSIGNMENT]),
            };
            plan_noniid(&train, n, &spec)?
                .into_iter()
                .map(WorkerShard::Indices)
                .collect()
        }
    };
    shards
        .into_iter()
        .enumerate()
        .map(|(w, shard)| BatchStream::new(train.clone(), shard, w, stream_seed))
        .collect()
}

/// Elementwise mean of equally laid out vectors, in the given order.
fn mean_params(parts: &[&[f64]]) -> Vec<f64> {
    let mut acc = vec![0.0; parts[0].len()];
    for (k, p) in parts.iter().enumerate() {
        let count = (k + 1) as f64;
        for (a, &x) in acc.iter_mut().zip(p.iter()) {
            *a += (x - *a) / count;
        }
    }
    acc
}

/// Models to evaluate, oldest first. Lockstep strategies evaluate the mean of
/// the worker replicas; SSP evaluates the server's copy.
fn eval_models(cfg: &ExperimentConfig, handle: &RunHandle) -> Vec<Snapshot> {
    if cfg.strategy.is_async() {
        let mut snaps = handle.ps.snapshots.clone();
        let global = handle.ps.global.values();
        if snaps.last().is_none_or(|s| s.params != global) {
            let step = handle
                .workers
                .iter()
                .filter_map(|w| w.records.last().map(|r| r.step))
                .max()
                .unwrap_or(0);
            let time = handle.workers.iter().map(|w| w.clock).fold(0.0, f64::max);
            snaps.push(Snapshot {
                step,
                time,
                params: global.to_vec(),
            });
        }
        return snaps;
    }
    let mut by_step: BTreeMap<u64, Vec<&Snapshot>> = BTreeMap::new();
    for w in &handle.workers {
        for s in &w.snapshots {
            by_step.entry(s.step).or_default().push(s);
        }
    }
    by_step
        .into_iter()
        .filter(|(_, snaps)| snaps.len() == handle.workers.len())
        .map(|(step, snaps)| {
            let parts: Vec<&[f64]> = snaps.iter().map(|s| s.params.as_slice()).collect();
            Snapshot {
                step,
                time: snaps.iter().map(|s| s.time).fold(0.0, f64::max),
                params: mean_params(&parts),
            }
        })
        .collect()
}

/// Index of the evaluation at which `patience` evaluations in a row failed to
/// beat the best accuracy so far.
pub fn patience_cut(points: &[EvalPoint], patience: usize) -> Option<usize> {
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for (i, p) in points.iter().enumerate() {
        if p.accuracy > best {
            best = p.accuracy;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                return Some(i);
            }
        }
    }
    None
}

fn write_outputs(dir: &Path, records: &[MetricsRecord], summary: &RunSummary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    for r in records {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;

    let mut csv = csv::Writer::from_path(dir.join("eval.csv"))?;
    csv.write_record(["step", "accuracy", "mean_loss"])?;
    for p in &summary.eval {
        csv.write_record([p.step.to_string(), p.accuracy.to_string(), p.mean_loss.to_string()])?;
    }
    csv.flush()?;

    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

/// Runs one experiment. Outputs are written to `out_dir` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>, opts: RunOptions) -> Result<RunOutcome> {
    let clock = Instant::now();
    cfg.validate()?;
    let cfg = cfg.resolved();
    let (train, test) = cfg.load_data()?;
    let spe = cfg.steps_per_epoch(train.len());
    let steps = cfg.total_steps(spe);
    let workers = cfg.cluster.workers;

    let injection = cfg.injection.map(|rates| InjectionSetup {
        config: InjectionConfig {
            alpha: rates.alpha,
            beta: rates.beta,
            base_batch: cfg.batch,
        },
        seed: cfg.seeds.injection,
    });
    if let Some(inj) = &injection {
        inj.config.validate()?;
    }
    let batch = injection
        .as_ref()
        .map_or(cfg.batch, |inj| adjusted_batch(&inj.config, workers));

    let streams = build_streams(&cfg, Arc::new(train))?;
    let plan = RunPlan {
        workers,
        strategy: cfg.strategy.clone(),
        spec: cfg.model.clone(),
        schedule: cfg.lr.clone(),
        steps,
        steps_per_epoch: spe,
        batch,
        injection,
        participants_seed: cfg.seeds.participants,
        eval_every: cfg.eval_every,
        costs: cfg.costs,
        record_trajectory: opts.record_trajectory,
    };
    let handle = start_cluster(&cfg.cluster, plan, streams)?;

    let mut eval = eval_points(&cfg.model, &test, &eval_models(&cfg, &handle))?;
    if eval.is_empty() {
        return Err(Error::Protocol("run produced no evaluation snapshot".into()));
    }
    let cut = cfg.patience.and_then(|p| patience_cut(&eval, p));
    if let Some(i) = cut {
        eval.truncate(i + 1);
    }
    let last_step = cut.map(|i| eval[i].step);

    let mut records: Vec<MetricsRecord> = handle
        .workers
        .iter()
        .flat_map(|w| w.records.iter().cloned())
        .filter(|r| last_step.is_none_or(|s| r.step <= s))
        .collect();
    records.sort_by_key(|r| (r.step, r.worker_id));

    let summary = summarize(&cfg, &handle, &records, eval, cut.is_some(), clock.elapsed().as_secs_f64())?;
    if let Some(dir) = out_dir {
        write_outputs(dir, &records, &summary)?;
    }
    Ok(RunOutcome {
        summary,
        records,
        handle,
        steps_per_epoch: spe,
    })
}

fn eval_points(spec: &ModelSpec, test: &Dataset, models: &[Snapshot]) -> Result<Vec<EvalPoint>> {
    models
        .iter()
        .map(|s| {
            let params = ParamVector::new(s.params.clone(), spec.layout())?;
            let r = evaluate(&params, test, spec)?;
            Ok(EvalPoint {
                step: s.step,
                time: s.time,
                accuracy: r.accuracy,
                mean_loss: r.mean_loss,
            })
        })
        .collect()
}

fn summarize(
    cfg: &ExperimentConfig,
    handle: &RunHandle,
    records: &[MetricsRecord],
    eval: Vec<EvalPoint>,
    stopped_early: bool,
    elapsed_secs: f64,
) -> Result<RunSummary> {
    let (steps_local, steps_bsp) = count_decisions(records, 0);
    let warmup = cfg.strategy.warmup_steps();
    let (ratio, post_warmup) = if cfg.strategy.is_async() {
        (None, None)
    } else {
        let (l, b) = count_decisions(records, warmup);
        (Some(lssr(steps_local, steps_bsp)?), lssr(l, b).ok())
    };
    let last = *eval.last().expect("checked non-empty");
    let wall_time = if stopped_early {
        last.time
    } else {
        handle.workers.iter().map(|w| w.clock).fold(0.0, f64::max)
    };
    Ok(RunSummary {
        strategy: cfg.strategy.name().to_string(),
        workers: cfg.cluster.workers,
        total_steps: steps_local + steps_bsp,
        steps_local,
        steps_bsp,
        lssr: ratio,
        comm_reduction: ratio.map(comm_reduction).filter(|c| c.is_finite()),
        warmup_steps: warmup,
        lssr_post_warmup: post_warmup,
        final_metric: last.accuracy,
        best_metric: eval.iter().map(|p| p.accuracy).fold(f64::NEG_INFINITY, f64::max),
        final_loss: last.mean_loss,
        wall_time,
        total_bytes: records.iter().map(|r| r.bytes_sent + r.bytes_received).sum(),
        stopped_early,
        eval,
        elapsed_secs,
    })
}
