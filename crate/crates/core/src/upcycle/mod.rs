//! Dense → fine-grained MoE upcycling.
//!
//! The dense FFN is cut into `N = d_ffn / d_expert` contiguous slices along
//! its intermediate axis; summing the slice outputs reproduces the dense FFN.
//! A softmax router over those `N` always-active slices would weight each by
//! `1/N`, so the pseudo-MoE either multiplies the layer output by `N` or
//! scales every sliced matrix by `λ = N^(1/3)` (three matrices, `λ³ = N`,
//! exact when the gate activation is degree-1 homogeneous). The pseudo-MoE is
//! then expanded to `E` experts by replicating each slice `E/N` times and
//! re-initializing part of every replica (Drop-Upcycling).

mod drop;
mod equivalence;
mod plan;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tensor};
use crate::model::{names, Checkpoint};
use crate::moe::{ExpertWeights, MoEConfig};

pub use drop::{drop_count, drop_reinit, drop_reinit_with_indices};
pub use equivalence::{verify_equivalence, EquivalenceReport, EQUIVALENCE_TOLERANCE, PROBE_LEN};
pub use plan::{ScaleMode, UpcyclePlan};

/// Splits a dense FFN into contiguous `d_expert`-wide slices of the intermediate axis.
pub fn slice_ffn<T: Scalar>(
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
    d_expert: usize,
) -> Result<Vec<ExpertWeights<T>>> {
    let (d, h) = w_gate.dims2("W_gate")?;
    if w_up.shape() != [d, h] || w_down.shape() != [h, d] {
        return Err(Error::Dimension(format!(
            "gate {:?}, up {:?}, down {:?} are not a consistent FFN",
            w_gate.shape(),
            w_up.shape(),
            w_down.shape()
        )));
    }
    if d_expert == 0 || h % d_expert != 0 {
        return Err(Error::Plan(format!(
            "expert width {d_expert} does not divide the FFN width {h}"
        )));
    }
    (0..h / d_expert)
        .map(|i| {
            let (a, b) = (i * d_expert, (i + 1) * d_expert);
            Ok(ExpertWeights {
                gate: w_gate.columns(a, b)?,
                up: w_up.columns(a, b)?,
                down: w_down.row_range(a, b)?,
            })
        })
        .collect()
}

fn copy_shared<T: Scalar>(src: &Checkpoint<T>, tensors: &mut IndexMap<String, Tensor<T>>) {
    for (name, t) in src.tensors() {
        if !name.contains(".ffn.") && !name.contains(".moe.") {
            tensors.insert(name.clone(), t.clone());
        }
    }
}

/// Replaces every dense FFN with an `N`-expert, all-active MoE layer that
/// computes the same function.
pub fn build_pseudo_moe<T: Scalar>(dense: &Checkpoint<T>, plan: &UpcyclePlan) -> Result<Checkpoint<T>> {
    let cfg = &dense.config;
    if cfg.is_moe() {
        return Err(Error::Plan("pseudo-MoE source must be a dense checkpoint".into()));
    }
    plan.validate_for(cfg.d_ffn)?;
    let n = plan.n_slices;
    let (multiplier, scale) = match plan.scale_mode {
        ScaleMode::ForwardMultiplier => (n as f64, None),
        ScaleMode::WeightScale => (1.0, Some(T::from_f64_lossy(plan.lambda))),
    };
    let moe_cfg = MoEConfig {
        d_expert: plan.d_expert,
        n_experts: n,
        top_k: n,
        output_multiplier: multiplier,
        norm_topk_prob: false,
    };
    let mut tensors = IndexMap::new();
    copy_shared(dense, &mut tensors);
    for l in 0..cfg.n_layers {
        let w = dense.dense_ffn(l)?;
        let slices = slice_ffn(w.gate, w.up, w.down, plan.d_expert)?;
        tensors.insert(names::router(l), Tensor::zeros(&[cfg.d_model, n]));
        for (e, s) in slices.into_iter().enumerate() {
            let s = match scale {
                Some(lambda) => s.scale(lambda),
                None => s,
            };
            tensors.insert(names::expert_gate(l, e), s.gate);
            tensors.insert(names::expert_up(l, e), s.up);
            tensors.insert(names::expert_down(l, e), s.down);
        }
    }
    Checkpoint::new(cfg.with_moe(moe_cfg), tensors)
}

/// Independent random stream for one replica, derived from `(seed, layer, slice, replica)`.
pub fn replica_rng(seed: u64, layer: usize, slice: usize, replica: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 42) | ((slice as u64) << 21) | replica as u64);
    rng
}

/// Expands a pseudo-MoE to `E` experts. Expert `j` is replica `j / N` of slice
/// `j % N`; every replica (except the first one of each slice when
/// `spare_first_replica` is set) goes through [`drop_reinit`] with its own stream.
pub fn expand_to_full_moe<T: Scalar>(pseudo: &Checkpoint<T>, plan: &UpcyclePlan) -> Result<Checkpoint<T>> {
    let cfg = &pseudo.config;
    let src = cfg
        .moe
        .as_ref()
        .filter(|_| cfg.is_moe())
        .ok_or_else(|| Error::Plan("expansion needs a pseudo-MoE checkpoint".into()))?;
    plan.validate_for(cfg.d_ffn)?;
    if src.n_experts != plan.n_slices || src.d_expert != plan.d_expert {
        return Err(Error::Plan(format!(
            "pseudo-MoE has {} experts of width {}, plan expects {} of width {}",
            src.n_experts, src.d_expert, plan.n_slices, plan.d_expert
        )));
    }
    let moe_cfg = MoEConfig {
        d_expert: plan.d_expert,
        n_experts: plan.n_total_experts,
        top_k: plan.top_k,
        output_multiplier: src.output_multiplier,
        norm_topk_prob: src.norm_topk_prob,
    };
    let mut tensors = IndexMap::new();
    copy_shared(pseudo, &mut tensors);
    for l in 0..cfg.n_layers {
        let slices = pseudo.moe_layer(l)?.experts;
        tensors.insert(names::router(l), Tensor::zeros(&[cfg.d_model, plan.n_total_experts]));
        for j in 0..plan.n_total_experts {
            let (slice, replica) = (j % plan.n_slices, j / plan.n_slices);
            let expert = if plan.spare_first_replica && replica == 0 {
                slices[slice].clone()
            } else {
                let mut rng = replica_rng(plan.seed, l, slice, replica);
                drop_reinit(&slices[slice], plan.drop_ratio, &mut rng)
            };
            tensors.insert(names::expert_gate(l, j), expert.gate);
            tensors.insert(names::expert_up(l, j), expert.up);
            tensors.insert(names::expert_down(l, j), expert.down);
        }
    }
    Checkpoint::new(cfg.with_moe(moe_cfg), tensors)
}

/// Full pipeline: pseudo-MoE then expansion.
pub fn upcycle<T: Scalar>(dense: &Checkpoint<T>, plan: &UpcyclePlan) -> Result<Checkpoint<T>> {
    expand_to_full_moe(&build_pseudo_moe(dense, plan)?, plan)
}
