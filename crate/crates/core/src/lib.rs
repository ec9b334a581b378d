//! Kernelized linear attention with multiplicative position embeddings,
//! gated feed-forward layers and a Conformer-style block, plus the
//! gradient and latency tooling used to verify them.

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod numerics;
pub mod param_io;

pub use error::{LmecError, Result};
pub use numerics::{Matrix, Rng};
