//! Visual-inertial-ranging odometry.
//!
//! An MSCKF-style error-state filter fusing IMU, monocular feature tracks and
//! UWB ranging to anchors whose positions are estimated online. Anchors are
//! bootstrapped from a long keyframe window, and first-estimate Jacobians keep
//! the estimator's unobservable subspace intact. The crate also ships the
//! simulator, the observability checks and the evaluation harness.

pub mod error;
pub mod harness;
pub mod mathx;
pub mod observability;
pub mod propagation;
pub mod ranging;
pub mod sim;
pub mod state;
pub mod uwb_init;
pub mod vision;

pub use error::{Error, Result};
pub use mathx::{Quat, Rot3, Vec3};
