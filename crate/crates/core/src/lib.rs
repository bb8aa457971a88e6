//! Discrete audio tokenization methods (k-means, representation codec with
//! VQ/RVQ, and a supervised split-encoder tokenizer) compared through two
//! caption-generation models on deterministic synthetic soundscapes.

pub mod artifact;
pub mod captioner;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod quantize;
pub mod repcodec;
pub mod suptok;

pub use error::{Error, Result};
