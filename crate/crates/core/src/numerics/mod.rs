//! Dense tensors, reverse-mode differentiation, the CNN, the class-weighted
//! loss, and Adam.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use kernels::PROB_EPSILON;
pub use model::{ConvLayerSpec, Model, ModelConfig, TapedForward, INPUT_OFFSET};
pub use optim::AdamState;
pub use tensor::Tensor;

use crate::error::Result;

/// Evaluates the class-weighted cross-entropy on plain probabilities.
pub fn weighted_cross_entropy(probs: &Tensor, targets: &[u8], w0: f32, w1: f32) -> Result<f32> {
    let mut g = Graph::new();
    let p = g.leaf(probs.clone());
    let loss = g.weighted_cross_entropy(p, targets, w0, w1)?;
    g.value(loss).item()
}
