//! File formats, threading and orchestration around `curio-core`.
//!
//! The `curio` binary exposes four subcommands: `pretrain` builds a frozen
//! backbone, `train` runs an experiment, `diag` summarizes one and
//! `compare` lines several up.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod diag;
pub mod error;
pub mod pretrain;
pub mod runner;
pub mod vecenv;

pub use error::{LabError, Result};
