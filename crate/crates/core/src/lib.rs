//! A desk-scale laboratory for semi-synchronous distributed SGD.
//!
//! The crate drives small differentiable models (logistic regression and a
//! two-layer MLP) across a parameter-server cluster under four coordination
//! protocols:
//!
//! - **BSP**: every step is aggregated behind a barrier.
//! - **FedAvg(C, E)**: local SGD with periodic averaging of a worker fraction.
//! - **SSP(s)**: asynchronous gradient pushes gated by a staleness bound.
//! - **SelSync(δ)**: workers track the relative change of their smoothed
//!   squared gradient norm and synchronize only on steps where any worker's
//!   change reaches the threshold δ; otherwise updates stay local.
//!
//! Module map:
//!
//! - [`numeric`]: model, loss, analytic backprop, SGD, learning-rate schedules.
//! - [`signal`]: EWMA gradient-change detector and the Hessian power-iteration oracle.
//! - [`data`]: datasets, chunking, DefDP/SelDP/non-IID plans, data injection.
//! - [`strategy`]: strategy configs, aggregation, and per-step worker drivers.
//! - [`runtime`]: wire format, deterministic simulator, TCP transport, parameter server.
//! - [`harness`]: experiment configs, metrics, evaluation, run comparison.

pub mod data;
pub mod error;
pub mod harness;
pub mod numeric;
pub mod runtime;
pub mod seed;
pub mod signal;
pub mod strategy;

pub use error::{Error, Result};
