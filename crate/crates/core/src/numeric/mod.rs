//! Model parameters, loss, analytic gradients and plain SGD.

mod model;
mod schedule;
mod vector;

pub use model::{
    finite_diff_grad, forward_backward, init_params, logits, loss, predict, Activation, Batch,
    ModelSpec,
};
pub use schedule::{LrSchedule, PeriodicDecay, ScheduleMode};
pub use vector::{sgd_step, FlatVector, GradientVector, Layout, ParamVector, TensorSlot};
