//! Text pipeline, training loop, checkpoints, diagnostics and the `capsgraph`
//! command-line tool, built on [`capsgraph_core`].

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod export;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use capsgraph_core as core;
pub use error::{Error, Result};
