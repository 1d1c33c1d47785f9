//! Intertwining bounds for weighted Laplacians on Riemannian manifolds.

pub mod config;
pub mod error;
pub mod expr;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pathsim;
pub mod rng;
pub mod run;
pub mod semigroup;
pub mod spectral;
pub mod twistcalc;
pub mod verify;

pub use error::{Error, Result};
pub use geometry::{ChartDomain, ChartPoint, ManifoldKind, ManifoldSpec};
pub use model::{ModelSpec, Region};
