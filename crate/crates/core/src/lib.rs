//! Segmentation-centric single-object tracking: two online least-squares
//! learners, an instance-conditioned segmentation decoder, joint training and
//! an evaluation toolkit.

pub mod ablation;
pub mod autodiff;
pub mod bbox;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod inst;
pub mod io;
pub mod memory;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod seg;
pub mod tracker;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
