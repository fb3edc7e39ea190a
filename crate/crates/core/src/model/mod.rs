//! Dense/MoE decoder: configuration, checkpoints, forward pass and gradients.

mod attention;
mod checkpoint;
mod config;
pub mod ffn;
mod init;
pub mod io;
pub mod names;
mod norm;
mod transformer;

pub use attention::{gqa_attention, AttentionWeights};
pub use checkpoint::{Checkpoint, GradientSet};
pub use config::{FfnKind, ModelConfig, BYTE_VOCAB};
pub use ffn::{dense_ffn, gated_ffn, Activation};
pub use init::{init_dense, init_moe, INIT_STD};
pub use io::AnyCheckpoint;
pub(crate) use transformer::{ffn_inputs, ffn_layer_output};
pub use transformer::{
    evaluate_loss, forward_logits, lm_loss_and_grads, loss_and_grads, AuxCoefficients,
    ForwardOutput, LossBreakdown, LossReport,
};
