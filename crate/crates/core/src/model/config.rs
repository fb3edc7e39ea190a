use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ffn::Activation;
use crate::model::names;
use crate::moe::MoEConfig;

/// Byte-level vocabulary: 256 byte values plus BOS, EOS and PAD.
pub const BYTE_VOCAB: usize = 259;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Dense,
    Moe,
}

fn default_theta() -> f64 {
    10000.0
}
fn default_eps() -> f64 {
    1e-6
}
fn default_true() -> bool {
    true
}

/// Geometry of a dense or MoE decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Intermediate width of the dense FFN.
    pub d_ffn: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_true")]
    pub qk_norm: bool,
    #[serde(default)]
    pub activation: Activation,
    pub ffn_kind: FfnKind,
    #[serde(default)]
    pub moe: Option<MoEConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "{} query heads cannot be grouped over {} KV heads",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "RoPE needs an even head dimension, got {}",
                self.d_head
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::Config("rope_theta must be positive".into()));
        }
        match (self.ffn_kind, &self.moe) {
            (FfnKind::Dense, None) => Ok(()),
            (FfnKind::Moe, Some(m)) => m.validate(),
            (FfnKind::Dense, Some(_)) => Err(Error::Config(
                "dense model must not carry an MoE section".into(),
            )),
            (FfnKind::Moe, None) => Err(Error::Config("MoE model needs an MoE section".into())),
        }
    }

    pub fn is_moe(&self) -> bool {
        self.ffn_kind == FfnKind::Moe
    }

    pub fn moe_config(&self) -> Result<&MoEConfig> {
        self.moe
            .as_ref()
            .ok_or_else(|| Error::Misuse("model has no MoE layers".into()))
    }

    pub fn q_width(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn parameter_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut specs = vec![(names::EMBED.to_string(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            specs.push((names::attn_norm(l), vec![d]));
            specs.push((names::q_proj(l), vec![d, self.q_width()]));
            specs.push((names::k_proj(l), vec![d, self.kv_width()]));
            specs.push((names::v_proj(l), vec![d, self.kv_width()]));
            specs.push((names::o_proj(l), vec![self.q_width(), d]));
            if self.qk_norm {
                specs.push((names::q_norm(l), vec![self.d_head]));
                specs.push((names::k_norm(l), vec![self.d_head]));
            }
            specs.push((names::ffn_norm(l), vec![d]));
            match &self.moe {
                Some(m) if self.is_moe() => {
                    specs.push((names::router(l), vec![d, m.n_experts]));
                    for e in 0..m.n_experts {
                        specs.push((names::expert_gate(l, e), vec![d, m.d_expert]));
                        specs.push((names::expert_up(l, e), vec![d, m.d_expert]));
                        specs.push((names::expert_down(l, e), vec![m.d_expert, d]));
                    }
                }
                _ => {
                    specs.push((names::ffn_gate(l), vec![d, self.d_ffn]));
                    specs.push((names::ffn_up(l), vec![d, self.d_ffn]));
                    specs.push((names::ffn_down(l), vec![self.d_ffn, d]));
                }
            }
        }
        specs.push((names::FINAL_NORM.to_string(), vec![d]));
        if !self.tie_embeddings {
            specs.push((names::LM_HEAD.to_string(), vec![self.vocab_size, d]));
        }
        specs
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Dense source geometry shared by both released models.
    pub fn reference_dense() -> Self {
        Self {
            n_layers: 28,
            d_model: 1024,
            d_ffn: 3072,
            n_q_heads: 16,
            n_kv_heads: 8,
            d_head: 128,
            vocab_size: BYTE_VOCAB,
            rope_theta: default_theta(),
            norm_eps: default_eps(),
            tie_embeddings: true,
            qk_norm: true,
            activation: Activation::Silu,
            ffn_kind: FfnKind::Dense,
            moe: None,
        }
    }

    pub fn reference_nano() -> Self {
        Self {
            ffn_kind: FfnKind::Moe,
            moe: Some(MoEConfig::nano()),
            ..Self::reference_dense()
        }
    }

    pub fn reference_mini() -> Self {
        Self {
            ffn_kind: FfnKind::Moe,
            moe: Some(MoEConfig::mini()),
            ..Self::reference_dense()
        }
    }

    /// Small dense model for tests and desk-scale experiments.
    pub fn tiny_dense(d_model: usize, d_ffn: usize, n_layers: usize) -> Self {
        Self {
            n_layers,
            d_model,
            d_ffn,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: d_model / 4,
            vocab_size: BYTE_VOCAB,
            rope_theta: default_theta(),
            norm_eps: default_eps(),
            tie_embeddings: true,
            qk_norm: true,
            activation: Activation::Silu,
            ffn_kind: FfnKind::Dense,
            moe: None,
        }
    }

    /// Same geometry with the FFN swapped for the given MoE layer.
    pub fn with_moe(&self, moe: MoEConfig) -> Self {
        Self {
            ffn_kind: FfnKind::Moe,
            moe: Some(moe),
            ..self.clone()
        }
    }
}
