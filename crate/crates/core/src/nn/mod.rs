//! Minimal differentiable-model substrate: a dense MLP with softmax
//! cross-entropy, first-order backprop, SGD/Adam, and finite-difference
//! gradient checking.

mod batch;
mod mlp;
mod objective;
mod optim;
mod params;
mod train;

pub use batch::Batch;
pub use mlp::{
    forward, grad, grad_fd, loss_and_grad, loss_ce, Activation, Logits, MlpArchitecture,
};
pub use objective::{
    finite_difference_gradient, BatchObjective, Objective, ProximalObjective, QuadraticObjective,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::ParamVector;
pub use train::{train_local, LocalSchedule, Proximal};
