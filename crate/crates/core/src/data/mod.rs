//! Datasets, chunking, partition plans and per-step data injection.

mod dataset;
mod injection;
mod partition;

pub use dataset::{
    blob_centers, generate_blobs, meta_path, read_csv, write_csv, Dataset, DatasetMeta, Split,
    MIN_CENTER_DISTANCE,
};
pub(crate) use injection::ceil_count;
pub use injection::{
    adjusted_batch, donor_share, injection_round, select_injection, InjectionConfig, InjectionPlan,
};
pub use partition::{
    plan_defdp, plan_noniid, plan_seldp, planning_calls, split_chunks, BatchStream, ChunkSplit,
    NonIidSpec, PartitionPlan, WorkerShard,
};
