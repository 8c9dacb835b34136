//! Data-enabled predictive control (DeePC) for stochastic LTI systems.
//!
//! The crate provides the pieces of a data-driven receding-horizon controller
//! and the experiment machinery around it:
//!
//! - [`lti_sim`]: stochastic plant simulation and persistently exciting inputs,
//! - [`hankel`]: block-Hankel data matrices and their offline averaging,
//! - [`qp`]: a dense active-set QP solver with optimizer sensitivities,
//! - [`deepc`]: the DeePC program in multiparametric form and its prediction map,
//! - [`ekf`]: an extended Kalman filter on the window of past outputs,
//! - [`harness`]: closed-loop runs, Monte-Carlo statistics and parameter sweeps.

pub mod error;
pub mod hankel;
pub mod linalg;
pub mod lti_sim;
pub mod qp;
pub mod seeds;
pub mod deepc;
pub mod ekf;
pub mod harness;

pub use error::{Error, Result};
