//! Grey-box recurrent integrator cells that learn residual dynamics, with a
//! differentiable orthogonal projection that keeps states on a constraint
//! manifold.

pub mod autodiff;
pub mod battery;
pub mod error;
pub mod experiment;
pub mod integrate;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod projection;
pub mod systems;
pub mod train;

pub use error::{Error, Result};
