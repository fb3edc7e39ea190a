//! Fine-grained MoE feed-forward layer.
//!
//! A softmax router picks `top_k` of `n_experts` small SwiGLU experts per
//! token; the layer output is `output_multiplier · Σ wᵢ·expertᵢ(h)` over the
//! selected experts. The multiplier is 1 for ordinary models and `N` for a
//! pseudo-MoE built from `N` dense slices.

mod layer;
mod log;
mod router;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tensor};
use crate::model::ffn::FfnRef;

pub use layer::{moe_forward, moe_forward_with, MoeOutput};
pub(crate) use layer::{moe_backward, moe_forward_cached, MoeAuxGrad, MoeCache};
pub use log::{load_balance_loss, router_z_loss, LayerStats, RoutingLog, RoutingRecord};
pub use router::{route, select_top_k, Routing};

fn default_multiplier() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Intermediate width of one expert.
    pub d_expert: usize,
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default = "default_multiplier")]
    pub output_multiplier: f64,
    #[serde(default)]
    pub norm_topk_prob: bool,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_expert == 0 {
            return Err(Error::Config("d_expert must be at least 1".into()));
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} must lie in 1..={} (n_experts)",
                self.top_k, self.n_experts
            )));
        }
        if !(self.output_multiplier.is_finite() && self.output_multiplier > 0.0) {
            return Err(Error::Config(format!(
                "output multiplier {} must be positive and finite",
                self.output_multiplier
            )));
        }
        Ok(())
    }

    /// Reference geometry of the smaller released model (232 experts of width 384).
    pub fn nano() -> Self {
        Self {
            d_expert: 384,
            n_experts: 232,
            top_k: 8,
            output_multiplier: 1.0,
            norm_topk_prob: false,
        }
    }

    /// Reference geometry of the larger released model (256 experts of width 768).
    pub fn mini() -> Self {
        Self {
            d_expert: 768,
            n_experts: 256,
            top_k: 8,
            output_multiplier: 1.0,
            norm_topk_prob: false,
        }
    }
}

/// One expert's gate/up/down projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights<T> {
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

impl<T: Scalar> ExpertWeights<T> {
    pub fn as_ref(&self) -> FfnRef<'_, T> {
        FfnRef {
            gate: &self.gate,
            up: &self.up,
            down: &self.down,
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            gate: self.gate.scale(s),
            up: self.up.scale(s),
            down: self.down.scale(s),
        }
    }
}

/// Router plus expert triplets of one MoE layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MoELayerParams<T> {
    /// `d_model × n_experts`.
    pub router: Tensor<T>,
    pub experts: Vec<ExpertWeights<T>>,
}

impl<T: Scalar> MoELayerParams<T> {
    pub fn expert_refs(&self) -> Vec<FfnRef<'_, T>> {
        self.experts.iter().map(ExpertWeights::as_ref).collect()
    }
}
