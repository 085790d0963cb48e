//! Exponential-integrator 4D-Var toolkit.
//!
//! The crate stacks four layers:
//!
//! * [`matfun`]: Krylov and dense evaluation of φ/ψ matrix functions.
//! * [`integrator`]: the EPIRK-W forward step with checkpoint tapes, and
//!   [`adjoint`]: its exact discrete adjoint sweep.
//! * [`assimilation`]: 4D-Var cost/gradient assembly, covariances, twin
//!   experiments, parameter-state augmentation; [`optimize`]: the
//!   bound-constrained L-BFGS driver.
//! * [`models`]: the Lorenz-96 lattice and a nonlinear-diffusion surrogate
//!   used by the experiments, with [`reference`] providing high-accuracy
//!   oracle integrators.

pub mod adjoint;
pub mod assimilation;
pub mod cli;
pub mod error;
pub mod integrator;
pub mod matfun;
pub mod model;
pub mod models;
pub mod optimize;
pub mod reference;
pub mod tableau;

pub use error::{Error, Result};
