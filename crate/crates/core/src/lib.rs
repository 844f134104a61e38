//! Finite systems of hard-core Brownian globules: spheres in R³ whose centers
//! perform Brownian motions and whose radii oscillate in `[r_minus, r_plus]`,
//! reflected obliquely when two globules touch or a radius hits a bound.
//!
//! The crate provides the boundary geometry of the allowed set, the
//! confinement potential, a projected Euler–Maruyama integrator with
//! local-time bookkeeping, birth–death–move samplers for the stationary
//! measures, and path diagnostics.

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod penalization;
pub mod projection;
pub mod rng;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{Configuration, Globule, ModelParams, Vec3};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
