use std::cell::Cell;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::numeric::Batch;
use crate::{seed, Error, Result};

thread_local! {
    static PLANNING_CALLS: Cell<u64> = const { Cell::new(0) };
}

fn count_planning_call() {
    PLANNING_CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of partition-planning calls made on this thread so far.
pub fn planning_calls() -> u64 {
    PLANNING_CALLS.with(Cell::get)
}

/// One global seeded shuffle cut into `N` contiguous, near-equal ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSplit {
    order: Vec<usize>,
    bounds: Vec<(usize, usize)>,
}

impl ChunkSplit {
    pub fn num_chunks(&self) -> usize {
        self.bounds.len()
    }

    /// `(start, end)` ranges into the shuffled order.
    pub fn bounds(&self) -> &[(usize, usize)] {
        &self.bounds
    }

    /// Dataset indices belonging to chunk `c`.
    pub fn chunk(&self, c: usize) -> &[usize] {
        let (start, end) = self.bounds[c];
        &self.order[start..end]
    }
}

pub fn split_chunks(dataset: &Dataset, workers: usize, seed: u64) -> Result<ChunkSplit> {
    count_planning_call();
    let len = dataset.len();
    if workers == 0 || workers > len {
        return Err(Error::config(format!(
            "cannot split {len} samples into {workers} chunks"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (len / workers, len % workers);
    let mut bounds = Vec::with_capacity(workers);
    let mut start = 0;
    for c in 0..workers {
        let size = base + usize::from(c < extra);
        bounds.push((start, start + size));
        start += size;
    }
    Ok(ChunkSplit { order, bounds })
}

/// Ordered view of the chunks one worker traverses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub worker_id: usize,
    pub num_workers: usize,
    pub chunk_order: Vec<usize>,
}

fn check_worker(worker_id: usize, workers: usize) -> Result<()> {
    if worker_id >= workers {
        return Err(Error::config(format!("worker {worker_id} out of range for {workers} workers")));
    }
    Ok(())
}

/// Default partitioning: worker `n` owns chunk `n` only.
pub fn plan_defdp(worker_id: usize, workers: usize) -> Result<PartitionPlan> {
    count_planning_call();
    check_worker(worker_id, workers)?;
    Ok(PartitionPlan {
        worker_id,
        num_workers: workers,
        chunk_order: vec![worker_id],
    })
}

/// Rotation partitioning: every chunk, starting from the worker's own.
pub fn plan_seldp(worker_id: usize, workers: usize) -> Result<PartitionPlan> {
    count_planning_call();
    check_worker(worker_id, workers)?;
    Ok(PartitionPlan {
        worker_id,
        num_workers: workers,
        chunk_order: (0..workers).map(|k| (worker_id + k) % workers).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonIidSpec {
    pub labels_per_worker: usize,
    #[serde(default)]
    pub assignment_seed: u64,
}

/// Label-skewed shards. Labels are shuffled once and dealt round-robin,
/// `labels_per_worker` at a time; each worker receives every sample of its labels.
pub fn plan_noniid(dataset: &Dataset, workers: usize, spec: &NonIidSpec) -> Result<Vec<Vec<usize>>> {
    count_planning_call();
    let classes = dataset.num_classes();
    if workers == 0 || spec.labels_per_worker == 0 {
        return Err(Error::config("non-IID split needs workers > 0 and labels_per_worker > 0"));
    }
    if spec.labels_per_worker * workers < classes {
        return Err(Error::config(format!(
            "{} labels per worker x {workers} workers cannot cover {classes} classes",
            spec.labels_per_worker
        )));
    }
    let mut labels: Vec<usize> = (0..classes).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.assignment_seed));
    let per_worker = spec.labels_per_worker.min(classes);
    let shards = (0..workers)
        .map(|w| {
            let mut owned = vec![false; classes];
            for j in 0..per_worker {
                owned[labels[(w * per_worker + j) % classes]] = true;
            }
            (0..dataset.len()).filter(|&i| owned[dataset.labels()[i]]).collect()
        })
        .collect();
    Ok(shards)
}

/// Where a worker draws its samples from.
#[derive(Debug, Clone)]
pub enum WorkerShard {
    Chunks { plan: PartitionPlan, split: Arc<ChunkSplit> },
    Indices(Vec<usize>),
}

/// Endless mini-batch iterator over a worker's shard.
///
/// One epoch of the stream is a full traversal of the shard (for SelDP, every
/// chunk in rotated order). Intra-chunk order is reshuffled at the start of
/// each traversal with a seed derived from `(seed, worker, traversal, chunk)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    dataset: Arc<Dataset>,
    shard: WorkerShard,
    worker: usize,
    seed: u64,
    traversal: Vec<(usize, usize)>,
    cursor: usize,
    pass: u64,
}

impl BatchStream {
    pub fn new(dataset: Arc<Dataset>, shard: WorkerShard, worker: usize, seed: u64) -> Result<Self> {
        let empty = match &shard {
            WorkerShard::Chunks { plan, split } => plan.chunk_order.iter().all(|&c| split.chunk(c).is_empty()),
            WorkerShard::Indices(idx) => idx.is_empty(),
        };
        if empty {
            return Err(Error::config(format!("worker {worker} has no training samples")));
        }
        let mut stream = BatchStream {
            dataset,
            shard,
            worker,
            seed,
            traversal: Vec::new(),
            cursor: 0,
            pass: 0,
        };
        stream.build_traversal();
        Ok(stream)
    }

    fn build_traversal(&mut self) {
        let worker = self.worker as u64;
        let pass = self.pass;
        let shuffled = |chunk: &[usize], chunk_id: usize| {
            let mut idx = chunk.to_vec();
            let s = seed::derive(self.seed, &[worker, pass, chunk_id as u64]);
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            idx.into_iter().map(move |i| (i, chunk_id))
        };
        self.traversal = match &self.shard {
            WorkerShard::Chunks { plan, split } => plan
                .chunk_order
                .iter()
                .flat_map(|&c| shuffled(split.chunk(c), c))
                .collect(),
            WorkerShard::Indices(idx) => shuffled(idx, self.worker).collect(),
        };
        self.cursor = 0;
    }

    /// Samples in one full traversal.
    pub fn traversal_len(&self) -> usize {
        self.traversal.len()
    }

    /// Completed traversals so far.
    pub fn passes(&self) -> u64 {
        self.pass
    }

    /// Dataset indices (with owning chunk) for the next `size` samples.
    pub fn next_indices(&mut self, size: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.traversal.len() {
                self.pass += 1;
                self.build_traversal();
            }
            let take = (size - out.len()).min(self.traversal.len() - self.cursor);
            out.extend_from_slice(&self.traversal[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }

    pub fn next_batch(&mut self, size: usize) -> Result<Batch> {
        if size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let picks = self.next_indices(size);
        let source = picks[0].1;
        let idx: Vec<usize> = picks.into_iter().map(|(i, _)| i).collect();
        self.dataset.gather(&idx, source)
    }
}
