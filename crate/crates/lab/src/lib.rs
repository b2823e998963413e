//! Experiment runner over `iib-core`: configuration files, method × weight ×
//! seed grids with per-run metrics files, aggregate tables, reports,
//! vertical-line sweeps and the oracle verification suites.

pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod report;
pub mod runs;
pub mod sweep;
pub mod verify;

pub use error::{LabError, Result};
