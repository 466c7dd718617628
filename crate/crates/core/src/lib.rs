//! Attentive local/global image descriptors on a small reverse-mode tensor
//! engine.
//!
//! The crate is `no_std` (with `alloc`) and deterministic: every random draw
//! goes through a seeded ChaCha stream and all math runs in `f64` via `libm`.
//! File formats, the CLI and anything touching the OS live in the `dalg`
//! crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod local;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod retrieval;
pub mod runconfig;
pub mod tensor;
pub mod train;

pub use config::{AttentionVariant, FusionKind, LocalVariant, ModelConfig};
pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use model::{DalgModel, StopGradient};
pub use param::{ParamId, ParamStore};
pub use tensor::Tensor;
