//! Discrete-time stochastic pricing engine.
//!
//! Prices follow `dS = mu dt + sigma sqrt(dt) xi`; the crate computes the
//! resulting expectations, densities and present values along several
//! independent routes (Monte Carlo, forward/backward PDEs, lattice path
//! integrals, closed forms) so that each can be checked against the others.

pub mod density;
pub mod error;
pub mod mc;
pub mod models;
pub mod numerics;
pub mod pathintegral;
pub mod portfolio;
pub mod pricing;
pub mod risk;
pub mod rng;
pub mod special;

pub use error::{Error, Result};
pub use mc::{MCEstimate, PathBatch, TimeGrid};
pub use models::{make_bm, make_gbm, make_vasicek, ModelSpec};
pub use portfolio::DiscountCurve;
