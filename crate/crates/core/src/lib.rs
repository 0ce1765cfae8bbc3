pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod cohort;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;

pub use error::{Error, Result};
