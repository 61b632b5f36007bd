//! Feature-space knowledge distillation for small embedding networks, with
//! relation-aware losses mined from identity prototypes and a feature bank,
//! plus synthetic data generation, verification metrics, and a CLI for
//! reproducible experiments.

pub(crate) mod binio;

pub mod cli;
pub mod data_io;
pub mod distill_losses;
pub mod error;
pub mod eval;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod vec_math;

pub use error::{Error, Result};
