//! Affinity-aware compression and expansion for toy human parsing.
//!
//! A small reverse-mode autodiff engine drives two attention operators: a
//! skeleton-guided channel affinity that rescales parsing channels, and a
//! boundary-guided spatial affinity that mixes parsing features across
//! positions. Both are embedded in a miniature parsing network trained on
//! synthetic stick figures.

pub mod acet;
pub mod affinity;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, UpsampleMode, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeometry;
pub use tensor::{Scalar, Tensor};
