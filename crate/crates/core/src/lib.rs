//! Group-invariant kernel ridge regression on manifolds with closed-form
//! Laplace-Beltrami spectra.
//!
//! - [`spectra`]: eigenbases, eigenfunctions, Weyl counts and sampling on
//!   flat tori and the round 2-sphere.
//! - [`actions`]: isometric group actions, invariant projectors, invariant
//!   dimension counts and quotient invariants.
//! - [`kernels`]: truncated Sobolev, bandlimited and heat kernels over
//!   invariant eigenfunctions.
//! - [`regress`]: kernel ridge regression, excess risk and the regularization
//!   schedule.
//! - [`harness`]: seeded sweeps, persistence, rate fits and gain estimates.

pub mod actions;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod regress;
pub mod spectra;

pub use error::{Error, Result};

/// Crate version, embedded in JSON outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
