//! Adaptive dual covariance steering.
//!
//! Designs affine feedback policies that steer the terminal mean and
//! covariance of a linear system with unknown multiplicative parameters,
//! while a recursive least-squares estimator identifies the parameters
//! online and the policy is scheduled on the running estimate. Policies are
//! optimized with a sample-average approximation over frozen Monte Carlo
//! scenarios and an augmented-Lagrangian solver.

pub mod error;
pub mod estimation;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod saa_nlp;
pub mod scenario;
pub mod solver;
pub mod steering;
pub mod vehicle;

pub use error::{Error, Result};
