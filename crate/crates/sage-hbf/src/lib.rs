//! File formats, experiment configuration, and the experiment runner built on
//! [`sage_hbf_core`].

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod report;

pub use config::ExperimentConfig;
pub use error::RunError;
