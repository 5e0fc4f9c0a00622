//! Policy improvement for entropy-regularized, infinite-horizon control of a
//! one-dimensional diffusion.
//!
//! The crate is organised around the iteration
//!
//! ```text
//! v^0  ->  y^n = D_x v^{n-1}  ->  pi^n = Gibbs(x, y^n, .)  ->  v^n = value of pi^n
//! ```
//!
//! * [`model`] holds the control problem primitives and the built-in models.
//! * [`quadrature`] integrates over the action space, including a stable
//!   log-integral-exp.
//! * [`gibbs`] builds Gibbs policies and their averaged ("hatted") coefficients.
//! * [`evaluate`] solves the discounted elliptic equation of a fixed policy.
//! * [`pia`] runs the improvement loop and records convergence diagnostics.
//! * [`rollout`] is an independent Euler-Maruyama Monte Carlo estimate of a
//!   policy's value.
//! * [`validate`] checks the standing assumptions of a problem by sampling.
//! * [`config`] and [`cli`] drive runs from a configuration file.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gibbs;
pub mod model;
pub mod pia;
pub mod quadrature;
pub mod rollout;
pub mod validate;

pub use error::{Error, Result};
