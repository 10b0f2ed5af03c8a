//! Spectral-element multiscale modeling framework for moist limited-area
//! atmospheric flows.
//!
//! One coarse large-scale simulator is coupled to many fine 2D cloud-scale
//! simulators through relaxation tendencies. Both tiers solve the moist
//! compressible Navier-Stokes equations with a continuous spectral-element
//! discretization, ARK2 IMEX time stepping and Kessler warm-rain physics.

pub mod cases;
pub mod complexity;
pub mod coupling;
pub mod driver;
pub mod dynamics;
pub mod error;
pub mod grid;
mod linalg;
pub mod microphysics;
pub mod operators;
pub mod timeint;

pub use error::{MmfError, Result};
