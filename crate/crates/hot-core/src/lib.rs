//! Permutation-equivariant higher-order transformer layers.
//!
//! The crate builds up from set partitions (the index-pattern classes that
//! parameterize equivariant maps) through equivariant linear layers,
//! higher-order attention in dense, sparse, and kernelized forms, and full
//! encoder stacks, plus the training and benchmarking harnesses used by
//! the command line tool.

pub mod attention;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linear;
pub mod mat;
pub mod mem;
pub mod ops_count;
pub mod partitions;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
