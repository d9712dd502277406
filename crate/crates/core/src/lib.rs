//! Numerical laboratory for subcritical superprocesses on finite state spaces.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] : killed Markov generator plus branching mechanism, `psi` and friends;
//! * [`spectral`] : mean semigroup and its Perron eigentriple `(lambda, phi, nu)`;
//! * [`cumulant`] : the nonlinear cumulant semigroup `V_t f` and extinction function `v_t`;
//! * [`qsd`] : Yaglom transform and the one-parameter family of quasi-stationary laws;
//! * [`sampler`] : Monte Carlo paths, conditioned ensembles and Sibuya compounding;
//! * [`oracle`] : closed forms for the single-site Feller branching diffusion;
//! * [`verify`] : invariant suites shared by the CLI and the acceptance tests.

pub mod config;
pub mod cumulant;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod oracle;
pub mod qsd;
pub mod report;
pub mod sampler;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
