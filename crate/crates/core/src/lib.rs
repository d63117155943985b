//! Detection of high-risk drug cocktails from individual case safety reports.
//!
//! The pipeline combines a hypergeometric disproportionality score over an
//! ATC-style drug hierarchy, a genetic search for high-scoring cocktails,
//! Metropolis-Hastings sampling of null score distributions for empirical
//! p-values, and density-based clustering of the significant results.
//!
//! Core numeric routines are generic over the scalar type through the
//! [`real::Real`] trait; [`Scalar`] is the default concrete choice.

pub mod atc;
pub mod cli;
pub mod cluster;
pub mod dataset;
pub mod distance;
pub mod fmt;
pub mod genetic;
pub mod mcmc;
pub mod real;
pub mod scoring;
#[cfg(test)]
pub(crate) mod testutil;

/// Default scalar type used by the CLI and the concrete re-exports.
pub type Scalar = f64;
/// Single-precision alternative for memory-bound callers.
pub type Scalar32 = f32;

pub use atc::{AtcTree, Cocktail, NodeId};
pub use dataset::{ExposureIndex, ReportSet};
pub use real::Real;
pub use scoring::CocktailCounts;
