//! Minimal differentiable-computation substrate: a reverse-mode tape over
//! dense row-major matrices, the layers built on it, AdamW, and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod math;
pub mod optim;
pub mod params;
pub mod real;

pub use gradcheck::grad_check;
pub use graph::{Graph, NodeId};
pub use layers::{
    sinusoidal_positions, Conv1dLayer, DecoderBlock, EmbeddingLayer, FeedForward, LayerNormLayer,
    Linear, MultiHeadAttention, TransformerBlock,
};
pub use optim::{linear_decay, AdamW};
pub use params::{Init, ParamId, ParamSet, Parameter};
pub use real::Real;

/// Output length of an unpadded 1-D convolution.
pub fn conv1d_out_len(t: usize, ksize: usize, stride: usize) -> usize {
    debug_assert!(t >= ksize && stride >= 1);
    (t - ksize) / stride + 1
}
