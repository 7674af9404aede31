//! Numerical laboratory for the join-the-shortest-queue (JSQ) system in the
//! Halfin-Whitt regime.
//!
//! The crate builds the JSQ Markov chain exactly, solves its stationary and
//! Poisson equations, simulates the reflected diffusion limit, and assembles
//! the generator-comparison error terms that connect the two, so that the
//! `O(1/sqrt(n))` convergence rate of steady-state observables can be
//! reproduced empirically. Supporting machinery includes the two-chain and
//! four-chain couplings behind finite-difference (Stein factor) estimates,
//! gambler's-ruin calibrations, a tensor-product degree-7 spline interpolant
//! with derivatives to third order, and the fluid-based Lyapunov function
//! with its drift check.

pub mod coupling;
pub mod diffusion;
pub mod error;
pub mod exact;
pub mod fluid;
pub mod grid;
pub mod model;
pub mod rngutil;
pub mod ruin;
pub mod solver;
pub mod spline;
pub mod stein;

pub use error::{Error, Result};
pub use grid::{GridFunction, TestFunction};
pub use model::{Instance, JsqState, ModelParams, ScaledState, SparseGenerator, StateSpace};
