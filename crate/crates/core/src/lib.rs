//! Numerical toolkit for deep operator stacks: Lip numbers of network blocks,
//! limit-architecture diagnostics, desk-scale scaling-law checks, covering
//! constants for infinite-depth classes, and layer-injection probes.
//!
//! The concepts are explained chapter by chapter in the guide under `book/`.

pub mod blocks;
pub mod error;
pub mod fixtures;
pub mod limitarch;
pub mod lipnum;
pub mod matrix;
pub mod probe;
pub mod report;
pub mod scaling;
pub mod seed;
pub mod weights;

pub use blocks::Block;
pub use error::{Error, Result};
pub use matrix::{spectral_norm, Matrix};
pub use seed::Seed;
