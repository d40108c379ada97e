//! Return-guided trajectory branches for offline decision-transformer
//! training: a point-maze data source, a trajectory value function, a
//! conditional diffusion model over trajectory segments, branch generation
//! and filtering, and the decision transformer itself.

pub mod branch;
pub mod dataset;
pub mod diffusion;
pub mod dt;
pub mod env;
pub mod error;
pub mod tvf;

pub use error::{Error, Result};
