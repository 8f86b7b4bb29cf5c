//! Numerical toolkit for infinite-horizon stochastic control of delay
//! equations with jumps.
//!
//! The crate is organised around the life cycle of a control experiment:
//!
//! * [`model`] holds the problem definition (coefficients, delay, control set,
//!   jump measure) and the time grid.
//! * [`forward`] simulates the controlled delayed state and the variational
//!   process under common random numbers.
//! * [`objective`] estimates the performance functional by Monte Carlo.
//! * [`hamiltonian`] evaluates and differentiates both Hamiltonians and checks
//!   the delay Itô formula.
//! * [`absde`] solves time-advanced backward equations by Picard iteration.
//! * [`adjoint`] assembles the problem-specific adjoint drivers.
//! * [`mp`] runs the sufficient and necessary maximum-principle checks.
//! * [`examples`] contains the closed-form benchmark problems.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod absde;
pub mod adjoint;
pub mod config;
pub mod error;
pub mod examples;
pub mod forward;
pub mod hamiltonian;
pub mod io;
pub mod model;
pub mod mp;
pub mod objective;
pub mod quadrature;
pub mod regression;
pub mod stats;

pub use error::{Error, Result};
pub use model::{ControlSet, InitialSegment, JumpModel, ProblemSpec, TimeGrid};
