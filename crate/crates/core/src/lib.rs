//! Desk-scale toolkit for dyadic Calderon-Zygmund experiments: random shifted
//! dyadic grids with good/bad cube classification, piecewise-constant dyadic
//! functions, accretive test-function systems, corona (stopping tree)
//! decompositions with perturbed test functions, twisted martingale
//! transforms, discretized singular integral operators, and the four-way
//! decomposition of the bilinear form with per-term decay instrumentation.
//!
//! Geometry is exact: all cubes live on the integer lattice of the finest
//! cells ("ticks", units of 2^-L), so corners, side lengths, and sup-norm
//! distances are integer arithmetic. Function values are f64.

pub mod accretive;
pub mod bilinear;
pub mod config;
pub mod corona;
pub mod czop;
pub mod dyfun;
pub mod error;
pub mod grid;
pub mod report;
pub mod seed;
pub mod stats;
pub mod twisted;

pub use error::{Error, Result};
