//! Interacting-particle Monte Carlo laboratory for the nonlinear Landau SDE
//! with generalized-Maxwellian coefficients, together with the numerical
//! checks that go with it: covariance spectrum bounds, step decomposition
//! scalings, mollifier density estimates, Gaussian-type envelopes, tail
//! bounds and weak-form moment balances.

pub mod bounds;
pub mod canonical;
pub mod density;
pub mod engine;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod orchestration;
pub mod rng;
pub mod scheme;
pub mod simulator;
pub mod snapshot;
pub mod stats;
pub mod weakform;

pub use error::{Error, Result};
