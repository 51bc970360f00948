//! Coarse-to-fine tensor learning: full-rank training at low spatial
//! resolutions, a CP-decomposition handoff, and low-rank training with
//! progressive finegraining, plus spatial regularization and the
//! diagnostics to measure speedup and factor interpretability.

pub mod config;
pub mod cp;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod interp;
pub mod io;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod reg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
