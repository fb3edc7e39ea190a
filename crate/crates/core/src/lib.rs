//! Fine-grained Mixture-of-Experts upcycling at desk scale.
//!
//! The crate covers the whole pipeline: a small dense decoder (GQA attention,
//! RMSNorm, SwiGLU, RoPE, tied embeddings) with analytic gradients, the
//! fine-grained MoE layer and its auxiliary losses, dense-to-MoE upcycling
//! (slicing, pseudo-MoE scaling, Drop-Upcycling expansion), a toy training
//! loop with a warmup-stable-decay schedule and staged data mixtures, and the
//! expert-routing analysis (language signatures, correlation, clustering).

pub mod atlas;
pub mod error;
pub mod kernels;
pub mod model;
pub mod moe;
pub mod train;
pub mod upcycle;

pub use error::{Error, Result};
pub use kernels::{DType, Scalar, Tensor};
pub use model::{Checkpoint, GradientSet, ModelConfig};
pub use moe::{MoEConfig, RoutingLog};
