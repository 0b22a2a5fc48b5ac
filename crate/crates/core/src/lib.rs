//! Self-distillation training for multi-exit networks.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod loss;
pub mod model;
pub mod probes;
pub mod trainer;

pub use error::{Error, Result};
