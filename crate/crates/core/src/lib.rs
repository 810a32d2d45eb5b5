//! Core of a desk-scale lab for prediction-error intrinsic motivation.
//!
//! Everything here is pure computation over `alloc`: a reverse-mode
//! differentiation engine, pixel grid environments, backbone pre-training,
//! the RND / RND+LR / PreND curiosity modules, a PPO learner and the
//! diagnostics that compare them. File formats, threads and the CLI live
//! in the `curio-lab` crate.
#![no_std]
extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod agent;
pub mod diagnostics;
pub mod diff;
pub mod digest;
pub mod embed;
pub mod env;
pub mod error;
pub mod intrinsic;
pub mod nets;
pub mod pretrain;
pub mod seed;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
