//! Minimal dense-tensor differentiable core: forward primitives with exact
//! reverse-mode gradients, finite-difference verification, Adam with
//! decoupled weight decay, and the checkpoint container.

pub mod check;
pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use check::{grad_check, DEFAULT_EPS};
pub use graph::{AttentionWeights, Gradients, Graph, NodeId};
pub use optim::{linear_decay, AdamConfig, ParameterStore};
pub use tensor::{Real, Tensor};
