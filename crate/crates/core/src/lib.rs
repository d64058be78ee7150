//! Galerkin-truncated stochastic 2D Navier-Stokes laboratory.

pub mod control;
pub mod error;
pub mod geometry;
pub mod integrator;
pub mod metrics;
pub mod rng;
pub mod spectral;
pub mod tangent;

pub use error::{Error, Result};
pub use geometry::{Mode, ModeSet};
pub use integrator::{IntegratorConfig, Model, NoiseModel, Scheme, TrajectoryRecord};
pub use spectral::{SpectralGrid, VorticityField};
pub use tangent::{LinearizedFlow, MalliavinMatrix, TangentVector};
