//! Minimal dense-tensor numerics for training small networks on CPU.
//!
//! Networks record their forward pass on a [`Tape`]; [`backprop`] replays it
//! in reverse to produce exact gradients keyed by parameter path, and
//! [`adam_step`] applies the update. All arithmetic is `f64`.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use error::{NeuralError, Result};
pub use gradcheck::{grad_check, grad_check_seeded, grad_check_with, CheckFixture};
pub use layers::{affine, layer_norm, net_forward, Mlp, Network, SelfAttention};
pub use params::{path_seed, ParamSet};
pub use tape::{backprop, AttentionLayout, Gradients, ParamGrads, Tape, Var};
pub use tensor::Tensor;
