//! Multicontinuum homogenization for high-contrast wave equations with partially
//! explicit time splitting.

pub mod analysis;
pub mod cell_problems;
pub mod coarse;
pub mod effective;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod field;
pub mod grid;
pub mod splitting;

pub use error::{Error, Result};
