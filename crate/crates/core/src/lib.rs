//! Bayesian contaminated case-control regression with BYM2 small-area effects.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: record ingestion, design matrices, standardization and the
//!   sampling corrections (θ₁, log offset) of the contaminated design.
//! - [`graph`]: adjacency graphs, the BYM2 scaling factor and Moran's I.
//! - [`posterior`]: the joint log-density and its analytic gradient.
//! - [`sampler`]: multinomial NUTS with windowed adaptation.
//! - [`diagnostics`]: split/rank-normalized/folded R̂ and ESS variants.
//! - [`predict`]: profile predictions, deprivation scenarios, residuals.
//! - [`simulation`]: the data generator, competing models and scoring.

pub mod data;
pub mod diagnostics;
pub mod draws_io;
mod error;
pub mod graph;
pub mod math;
pub mod posterior;
pub mod predict;
pub mod sampler;
pub mod simulation;

pub use error::{Error, Result};
