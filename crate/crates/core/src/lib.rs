//! Online adaptation of Kalman-filter noise statistics by optimal transport.
//!
//! Each time step compares particles drawn from the filter's one-step predictive
//! measurement Gaussian with pseudo-measurements built from a sliding window of past
//! innovations, and descends the transport cost with respect to the log standard
//! deviations of the process and measurement covariances.
//!
//! - [`ssm`]: state-space models and seeded trajectory simulation
//! - [`ekf`]: extended Kalman filter with log-parameterized diagonal noise
//! - [`ot`]: Sinkhorn, IPOT, an exact solver and the Gaussian W2 closed form
//! - [`adapt`]: the online adaptation loop
//! - [`harness`]: Monte-Carlo drift scenarios and MSE reporting

// `!(x >= 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod ekf;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod ot;
pub mod ssm;

pub use adapt::{AdaptConfig, AdaptLoss, AdaptMask, OptimizerState, ResidualWindow};
pub use ekf::{NoiseParams, PredictiveMeasurement, StateEstimate};
pub use error::{Error, Result};
pub use ot::{DiscreteMeasure, EpsilonPolicy, TransportPlan};
pub use ssm::{CovariancePair, Dynamics, SsmSpec, Trajectory};

/// Crate version, embedded in every output artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
