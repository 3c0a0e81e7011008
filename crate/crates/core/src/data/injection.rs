use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::Batch;
use crate::{seed, Error, Result};

/// Data-injection rates: a fraction `alpha` of workers each donate a fraction
/// `beta` of their batch to every other worker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub base_batch: usize,
}

/// Ceiling that ignores float noise just above an integer (`0.1 * 30` is
/// `3.0000000000000004`).
pub(crate) fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

fn round_half_down(x: f64) -> usize {
    (x - 0.5).ceil().max(0.0) as usize
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.beta) {
            return Err(Error::config(format!(
                "injection alpha and beta must lie in [0, 1], got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if self.base_batch == 0 {
            return Err(Error::config("injection base batch must be positive"));
        }
        Ok(())
    }

    pub fn donor_count(&self, workers: usize) -> usize {
        ceil_count(self.alpha * workers as f64).min(workers)
    }

    pub fn share_size(&self, adjusted: usize) -> usize {
        ceil_count(self.beta * adjusted as f64).min(adjusted)
    }
}

/// `b' = max(1, round(b / (1 + αβN)))`, rounding halves down.
pub fn adjusted_batch(cfg: &InjectionConfig, workers: usize) -> usize {
    let denom = 1.0 + cfg.alpha * cfg.beta * workers as f64;
    round_half_down(cfg.base_batch as f64 / denom).max(1)
}

/// Donor selection for one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub step: u64,
    /// Sorted donor worker ids.
    pub donors: Vec<usize>,
    /// Row indices (into the donor's local batch) each donor shares, aligned with `donors`.
    pub rows: Vec<Vec<usize>>,
}

impl InjectionPlan {
    pub fn is_donor(&self, worker: usize) -> Option<&[usize]> {
        self.donors.iter().position(|&d| d == worker).map(|i| self.rows[i].as_slice())
    }
}

/// Draws this step's donors and their shared rows. Every worker evaluates the
/// same `(seed, step)` and so agrees on the plan without communicating.
pub fn select_injection(cfg: &InjectionConfig, workers: usize, local_batch: usize, seed: u64, step: u64) -> InjectionPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[step]));
    let count = cfg.donor_count(workers);
    let share = cfg.share_size(local_batch);
    let mut donors = if share == 0 {
        Vec::new()
    } else {
        index::sample(&mut rng, workers, count).into_vec()
    };
    donors.sort_unstable();
    let rows = donors
        .iter()
        .map(|_| {
            let mut r = index::sample(&mut rng, local_batch, share).into_vec();
            r.sort_unstable();
            r
        })
        .collect();
    InjectionPlan { step, donors, rows }
}

/// Extracts the rows a donor shares.
pub fn donor_share(batch: &Batch, rows: &[usize]) -> Result<Batch> {
    let mut features = Vec::with_capacity(rows.len() * batch.dim);
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        if r >= batch.len() {
            return Err(Error::Dimension(format!("share row {r} outside batch of {}", batch.len())));
        }
        features.extend_from_slice(batch.row(r));
        labels.push(batch.labels[r]);
    }
    Batch::new(features, batch.dim, labels, batch.source_chunk)
}

/// Applies one injection round to every worker's batch at once. Each worker
/// keeps its own rows and appends, in donor-id order, the shares of every
/// donor other than itself.
pub fn injection_round(local_batches: &[Batch], plan: &InjectionPlan) -> Result<Vec<Batch>> {
    let shares = plan
        .donors
        .iter()
        .zip(&plan.rows)
        .map(|(&d, rows)| {
            let batch = local_batches
                .get(d)
                .ok_or_else(|| Error::config(format!("donor {d} has no batch")))?;
            Ok((d, donor_share(batch, rows)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(local_batches
        .iter()
        .enumerate()
        .map(|(w, own)| {
            let mut out = own.clone();
            for (d, share) in &shares {
                if *d != w {
                    out.extend_from(share);
                }
            }
            out
        })
        .collect())
}
