//! Numerical optimizers used by the registration, fitting, and mesh stages.

mod lbfgs;
mod trust_region;

pub use lbfgs::{minimize_lbfgs, LbfgsOptions, LbfgsOutcome};
pub use trust_region::{minimize_bounded, Objective, TrustRegionOptions, TrustRegionOutcome};
