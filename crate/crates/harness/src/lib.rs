//! Std side of the CST workspace: configuration files, on-disk formats,
//! the experiment sweep runner and the two-moons demo. The `cst` binary is a
//! thin CLI over this library.

pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod toy;

pub use error::{HarnessError, Result};
