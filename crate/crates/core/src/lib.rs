//! Simulation and verification tools for Stein's method of exchangeable
//! pairs on path space.

pub mod combinatorial;
pub mod error;
pub mod functionals;
pub mod graph;
pub mod mc;
pub mod ou_stein;
pub mod model;
pub mod paths;
pub mod quadrature;
pub mod time;

pub use error::{Error, Result};
pub use functionals::{CylinderFunctional, FunctionalRegistry, NormBound, NormClass};
pub use mc::{Engine, McEstimate, SeedSpec};
pub use model::{ExchangeableModel, ModelRegistry, TargetLaw};
pub use paths::PiecewiseConstantPath;
pub use time::TimePoint;
