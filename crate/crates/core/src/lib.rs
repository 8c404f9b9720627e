//! From-scratch offline handwritten-text recognition: a gated convolutional
//! encoder with additive attention and a bidirectional GRU decoder trained
//! under a CTC objective, plus the preprocessing, metrics, and training
//! machinery around it.
//!
//! Everything numeric is hand-rolled on dense `f64` tensors ([`tensor`]);
//! every layer ships its own backward pass and is validated against central
//! finite differences.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;
pub mod recurrent;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};

/// Cap the worker pool. A zero keeps the default (all cores). Must run
/// before the first parallel operation; later calls have no effect.
pub fn configure_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
