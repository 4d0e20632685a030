//! Global channel pruning: learns per-layer channel widths for a trained
//! CNN by sparsifying BatchNorm scales under a cost-weighted L1 penalty,
//! with convolution weights and normalization statistics held fixed.

pub mod cost;
pub mod data;
pub mod error;
pub mod gcp;
pub mod importance;
pub mod io;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
