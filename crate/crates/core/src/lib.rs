//! Decoupled temporal/spatial Transformer classifier for 18-channel vertical
//! ground reaction force (VGRF) gait recordings.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation: a small reverse-mode autodiff engine, the Transformer
//! building blocks, the model and its ablation variants, segmentation and
//! fold planning, a synthetic gait generator, the training loop and the
//! walk-level evaluation harness. File formats, configuration and the CLI
//! live in the `gaitformer` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
mod math;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Mode, Var};
pub use error::{Error, Result};
pub use model::{GaitformerModel, Variant};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

/// Number of VGRF channels per walk: 8 sensors under each foot plus the two
/// per-foot totals.
pub const NUM_CHANNELS: usize = 18;
