//! Learning and evaluating image iconicity from annotations and precomputed
//! feature vectors.

pub mod datamodel;
pub mod error;
pub mod indicators;
pub mod pipeline;
pub mod rankstats;
pub mod solvers;
pub mod synthetic;

pub use error::{Error, Result};
