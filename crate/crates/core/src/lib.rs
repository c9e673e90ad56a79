//! Entropy-regularized (exploratory) linear-quadratic-Gaussian mean field games
//! with several sub-populations.

pub mod error;
pub mod exec;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod reference;
pub mod variational;
pub mod meanfield;
pub mod riccati;
pub mod simulator;
pub mod trading;
mod serde_mat;

pub use error::{Error, Result};
pub use exec::Exec;
pub use nalgebra;
