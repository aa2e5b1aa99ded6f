//! Datasets, benchmark evaluation, ablation sweeps and reports.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod plot;

pub use config::Config;
