//! Cross-X learning for fine-grained classification on a small dense tensor
//! engine with reverse-mode differentiation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autodiff`], [`gradcheck`]: the numeric engine.
//! * [`blocks`]: one-squeeze multi-excitation gating, pooled heads and the
//!   pyramid merge of the last two stages.
//! * [`regularizers`]: correlation matrix, the cross-semantic loss, the
//!   cross-layer KL term and the full objective.
//! * [`model`], [`checkpoint`]: the staged network and its on-disk form.
//! * [`config`], [`data`], [`train`], [`ablation`]: experiments.
//! * [`cam`], [`verify`]: activation-map export and the verification suites.

pub mod ablation;
pub mod autodiff;
pub mod blocks;
pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod pooling;
pub mod registry;
pub mod regularizers;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Graph, Var};
pub use config::CrossXConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
