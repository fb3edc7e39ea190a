//! Decoder forward pass, losses and full analytic backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};
use crate::model::attention::{attention_backward, attention_forward, AttentionWeights, AttnCache};
use crate::model::ffn::{ffn_backward, ffn_forward, FfnCache};
use crate::model::norm::{norm_backward, norm_forward};
use crate::model::{names, Checkpoint, GradientSet};
use crate::moe::{moe_backward, moe_forward_cached, MoeAuxGrad, MoeCache, RoutingLog};

/// Weights of the auxiliary routing losses in the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxCoefficients {
    pub balance: f64,
    pub z: f64,
}

impl Default for AuxCoefficients {
    fn default() -> Self {
        Self {
            balance: 0.01,
            z: 0.001,
        }
    }
}

impl AuxCoefficients {
    pub const NONE: Self = Self { balance: 0.0, z: 0.0 };
}

/// Loss terms of one batch; `total = lm + c_b·balance + c_z·z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    /// Mean over MoE layers of `E·Σ fᵢPᵢ`; zero for dense models.
    pub balance: f64,
    /// Mean squared router logsumexp; zero for dense models.
    pub z: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LossReport {
    pub losses: LossBreakdown,
    /// Routing of every token in the batch (MoE models only).
    pub routing: Option<RoutingLog>,
    pub tokens: usize,
}

pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub routing: Option<RoutingLog>,
}

enum FfnState<T> {
    Dense(FfnCache<T>),
    Moe(MoeCache<T>),
}

struct LayerCache<T> {
    x_in: Tensor<T>,
    attn_inv: Vec<T>,
    attn: AttnCache<T>,
    x_mid: Tensor<T>,
    ffn_in: Tensor<T>,
    ffn_inv: Vec<T>,
    ffn: FfnState<T>,
}

struct SeqCache<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    x_out: Tensor<T>,
    final_inv: Vec<T>,
    hidden: Tensor<T>,
    logits: Tensor<T>,
}

fn attn_weights<T: Scalar>(ckpt: &Checkpoint<T>, l: usize) -> Result<AttentionWeights<'_, T>> {
    let qk = ckpt.config.qk_norm;
    Ok(AttentionWeights {
        q_proj: ckpt.get(&names::q_proj(l))?,
        k_proj: ckpt.get(&names::k_proj(l))?,
        v_proj: ckpt.get(&names::v_proj(l))?,
        o_proj: ckpt.get(&names::o_proj(l))?,
        q_norm: if qk { Some(ckpt.get(&names::q_norm(l))?) } else { None },
        k_norm: if qk { Some(ckpt.get(&names::k_norm(l))?) } else { None },
    })
}

fn embed<T: Scalar>(ckpt: &Checkpoint<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    let cfg = &ckpt.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let table = ckpt.get(names::EMBED)?;
    let mut x = Vec::with_capacity(tokens.len() * cfg.d_model);
    for &tok in tokens {
        let id = tok as usize;
        if id >= cfg.vocab_size {
            return Err(Error::Input(format!(
                "token id {tok} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        x.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![tokens.len(), cfg.d_model], x)
}

fn forward_seq<T: Scalar>(ckpt: &Checkpoint<T>, tokens: &[u32]) -> Result<SeqCache<T>> {
    let cfg = &ckpt.config;
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = embed(ckpt, tokens)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (a, attn_inv) = norm_forward(&x, ckpt.get(&names::attn_norm(l))?, eps);
        let (attn_out, attn) = attention_forward(&a, &attn_weights(ckpt, l)?, &positions, cfg)?;
        let mut x_mid = x.clone();
        x_mid.add_assign(&attn_out);
        let (ffn_in, ffn_inv) = norm_forward(&x_mid, ckpt.get(&names::ffn_norm(l))?, eps);
        let (ffn_out, ffn) = if cfg.is_moe() {
            let moe = cfg.moe_config()?;
            let experts = ckpt.expert_refs(l)?;
            let (y, c) = moe_forward_cached(
                &ffn_in,
                ckpt.get(&names::router(l))?,
                &experts,
                moe,
                cfg.activation,
            )?;
            (y, FfnState::Moe(c))
        } else {
            let (y, c) = ffn_forward(&ffn_in, ckpt.dense_ffn(l)?, cfg.activation)?;
            (y, FfnState::Dense(c))
        };
        let mut x_out = x_mid.clone();
        x_out.add_assign(&ffn_out);
        layers.push(LayerCache {
            x_in: x,
            attn_inv,
            attn,
            x_mid,
            ffn_in,
            ffn_inv,
            ffn,
        });
        x = x_out;
    }
    let (hidden, final_inv) = norm_forward(&x, ckpt.get(names::FINAL_NORM)?, eps);
    let logits = matmul_nt(&hidden, ckpt.output_projection()?)?;
    Ok(SeqCache {
        tokens: tokens.to_vec(),
        layers,
        x_out: x,
        final_inv,
        hidden,
        logits,
    })
}

fn routing_log<T: Scalar>(ckpt: &Checkpoint<T>, caches: &[SeqCache<T>]) -> Result<Option<RoutingLog>> {
    if !ckpt.config.is_moe() {
        return Ok(None);
    }
    let moe = ckpt.config.moe_config()?;
    let mut log = RoutingLog::new(moe.n_experts, moe.top_k);
    for c in caches {
        for (l, layer) in c.layers.iter().enumerate() {
            if let FfnState::Moe(m) = &layer.ffn {
                m.append_log(&mut log, l);
            }
        }
    }
    Ok(Some(log))
}

/// Logits for every position of `tokens`, plus the routing log for MoE models.
pub fn forward_logits<T: Scalar>(tokens: &[u32], ckpt: &Checkpoint<T>) -> Result<ForwardOutput<T>> {
    let mut caches = vec![forward_seq(ckpt, tokens)?];
    let routing = routing_log(ckpt, &caches)?;
    let logits = caches.pop().expect("one sequence").logits;
    Ok(ForwardOutput { logits, routing })
}

fn check_batch(inputs: &[Vec<u32>], targets: &[Vec<u32>]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} input sequences but {} target sequences",
            inputs.len(),
            targets.len()
        )));
    }
    for (i, (a, b)) in inputs.iter().zip(targets).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Input(format!(
                "sequence {i}: {} inputs but {} targets",
                a.len(),
                b.len()
            )));
        }
    }
    Ok(())
}

/// Batch-level routing statistics in the working precision.
struct RouterStats<T> {
    n_layers: usize,
    tokens: usize,
    /// Per MoE layer: selection counts and summed probabilities.
    counts: Vec<Vec<usize>>,
    prob_sum: Vec<Vec<T>>,
    lse_sq_sum: T,
}

fn router_stats<T: Scalar>(ckpt: &Checkpoint<T>, caches: &[SeqCache<T>]) -> Result<Option<RouterStats<T>>> {
    if !ckpt.config.is_moe() {
        return Ok(None);
    }
    let e = ckpt.config.moe_config()?.n_experts;
    let n_layers = ckpt.config.n_layers;
    let mut stats = RouterStats {
        n_layers,
        tokens: 0,
        counts: vec![vec![0; e]; n_layers],
        prob_sum: vec![vec![T::zero(); e]; n_layers],
        lse_sq_sum: T::zero(),
    };
    for c in caches {
        stats.tokens += c.tokens.len();
        for (l, layer) in c.layers.iter().enumerate() {
            if let FfnState::Moe(m) = &layer.ffn {
                for r in &m.routes {
                    for &i in &r.indices {
                        stats.counts[l][i] += 1;
                    }
                    for (s, &p) in stats.prob_sum[l].iter_mut().zip(&r.probs) {
                        *s = *s + p;
                    }
                    stats.lse_sq_sum = stats.lse_sq_sum + r.lse * r.lse;
                }
            }
        }
    }
    Ok(Some(stats))
}

fn losses<T: Scalar>(
    ckpt: &Checkpoint<T>,
    caches: &[SeqCache<T>],
    targets: &[Vec<u32>],
    stats: Option<&RouterStats<T>>,
    coeffs: AuxCoefficients,
) -> Result<LossBreakdown> {
    let vocab = ckpt.config.vocab_size;
    let mut ce = T::zero();
    let mut n = 0usize;
    for (c, tgt) in caches.iter().zip(targets) {
        for (t, &y) in tgt.iter().enumerate() {
            if y as usize >= vocab {
                return Err(Error::Input(format!("target id {y} out of range")));
            }
            let row = c.logits.row(t);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln();
            ce = ce + (lse - row[y as usize]);
            n += 1;
        }
    }
    let lm = (ce / T::from_usize(n).expect("count fits")).to_f64_lossy();
    let (mut balance, mut z) = (0.0, 0.0);
    if let Some(s) = stats {
        let moe = ckpt.config.moe_config()?;
        let tok = T::from_usize(s.tokens).expect("count fits");
        let slots = T::from_usize(s.tokens * moe.top_k).expect("count fits");
        let e = T::from_usize(moe.n_experts).expect("count fits");
        let mut b = T::zero();
        for l in 0..s.n_layers {
            let dot = s.counts[l]
                .iter()
                .zip(&s.prob_sum[l])
                .fold(T::zero(), |a, (&c, &p)| {
                    a + (T::from_usize(c).expect("count fits") / slots) * (p / tok)
                });
            b = b + e * dot;
        }
        let layers = T::from_usize(s.n_layers).expect("count fits");
        balance = (b / layers).to_f64_lossy();
        z = (s.lse_sq_sum / (layers * tok)).to_f64_lossy();
    }
    Ok(LossBreakdown {
        lm,
        balance,
        z,
        total: lm + coeffs.balance * balance + coeffs.z * z,
    })
}

/// Losses of a batch without gradients. `inputs[i]` and `targets[i]` align position by position.
pub fn evaluate_loss<T: Scalar>(
    ckpt: &Checkpoint<T>,
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
    coeffs: AuxCoefficients,
) -> Result<LossReport> {
    check_batch(inputs, targets)?;
    let caches = inputs
        .iter()
        .map(|s| forward_seq(ckpt, s))
        .collect::<Result<Vec<_>>>()?;
    let stats = router_stats(ckpt, &caches)?;
    let losses = losses(ckpt, &caches, targets, stats.as_ref(), coeffs)?;
    Ok(LossReport {
        losses,
        routing: routing_log(ckpt, &caches)?,
        tokens: inputs.iter().map(Vec::len).sum(),
    })
}

/// Losses and gradients of `lm + c_b·balance + c_z·z` for a batch.
///
/// Sequences are processed and their gradients summed in batch order.
/// Expert selection is treated as constant; gradients reach the router
/// through the selected probabilities and the auxiliary terms.
pub fn loss_and_grads<T: Scalar>(
    ckpt: &Checkpoint<T>,
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
    coeffs: AuxCoefficients,
) -> Result<(LossReport, GradientSet<T>)> {
    check_batch(inputs, targets)?;
    let cfg = &ckpt.config;
    let caches = inputs
        .iter()
        .map(|s| forward_seq(ckpt, s))
        .collect::<Result<Vec<_>>>()?;
    let stats = router_stats(ckpt, &caches)?;
    let losses = losses(ckpt, &caches, targets, stats.as_ref(), coeffs)?;
    let n_tokens: usize = inputs.iter().map(Vec::len).sum();
    let inv_n = T::one() / T::from_usize(n_tokens).expect("count fits");

    // Per-layer balance-loss gradient w.r.t. each token's probabilities, and
    // the z-loss gradient scale (multiplied by each token's lse).
    let aux_terms: Option<(Vec<Vec<T>>, T)> = match (&stats, coeffs == AuxCoefficients::NONE) {
        (Some(s), false) => {
            let moe = cfg.moe_config()?;
            let layers = T::from_usize(s.n_layers).expect("count fits");
            let tok = T::from_usize(s.tokens).expect("count fits");
            let slots = T::from_usize(s.tokens * moe.top_k).expect("count fits");
            let e = T::from_usize(moe.n_experts).expect("count fits");
            let cb = T::from_f64_lossy(coeffs.balance);
            let dprob = s
                .counts
                .iter()
                .map(|counts| {
                    counts
                        .iter()
                        .map(|&c| cb * e * (T::from_usize(c).expect("count fits") / slots) / (tok * layers))
                        .collect()
                })
                .collect();
            let two = T::one() + T::one();
            let zscale = T::from_f64_lossy(coeffs.z) * two / (layers * tok);
            Some((dprob, zscale))
        }
        _ => None,
    };

    let mut grads = GradientSet::zeros_like(ckpt);
    let out_name = if cfg.tie_embeddings {
        names::EMBED
    } else {
        names::LM_HEAD
    };
    for (c, tgt) in caches.iter().zip(targets) {
        let mut dlogits = c.logits.clone();
        for (t, &y) in tgt.iter().enumerate() {
            let row = dlogits.row_mut(t);
            crate::kernels::softmax_in_place(row);
            row[y as usize] = row[y as usize] - T::one();
            for v in row.iter_mut() {
                *v = *v * inv_n;
            }
        }
        let dhidden = matmul(&dlogits, ckpt.output_projection()?)?;
        grads.accumulate(out_name, &matmul_tn(&dlogits, &c.hidden)?)?;
        let mut dx = norm_backward(
            &c.x_out,
            ckpt.get(names::FINAL_NORM)?,
            &c.final_inv,
            &dhidden,
            grads.get_mut(names::FINAL_NORM)?,
        );

        for (l, layer) in c.layers.iter().enumerate().rev() {
            let dffn_in = match &layer.ffn {
                FfnState::Dense(fc) => {
                    let w = ckpt.dense_ffn(l)?;
                    let g = ffn_backward(&layer.ffn_in, w, fc, cfg.activation, &dx)?;
                    grads.accumulate(&names::ffn_gate(l), &g.gate)?;
                    grads.accumulate(&names::ffn_up(l), &g.up)?;
                    grads.accumulate(&names::ffn_down(l), &g.down)?;
                    g.dx
                }
                FfnState::Moe(mc) => {
                    let moe = cfg.moe_config()?;
                    let experts = ckpt.expert_refs(l)?;
                    let aux = aux_terms.as_ref().map(|(dprob, zscale)| MoeAuxGrad {
                        dprob: dprob[l].clone(),
                        dlse: mc.routes.iter().map(|r| *zscale * r.lse).collect(),
                    });
                    let g = moe_backward(
                        mc,
                        ckpt.get(&names::router(l))?,
                        &experts,
                        moe,
                        cfg.activation,
                        &dx,
                        aux.as_ref(),
                    )?;
                    grads.accumulate(&names::router(l), &g.router)?;
                    for (e, eg) in g.experts.iter().enumerate() {
                        if let Some(eg) = eg {
                            grads.accumulate(&names::expert_gate(l, e), &eg.gate)?;
                            grads.accumulate(&names::expert_up(l, e), &eg.up)?;
                            grads.accumulate(&names::expert_down(l, e), &eg.down)?;
                        }
                    }
                    g.dx
                }
            };
            let d_mid = norm_backward(
                &layer.x_mid,
                ckpt.get(&names::ffn_norm(l))?,
                &layer.ffn_inv,
                &dffn_in,
                grads.get_mut(&names::ffn_norm(l))?,
            );
            dx.add_assign(&d_mid);

            let w = attn_weights(ckpt, l)?;
            let g = attention_backward(&layer.attn, &w, cfg, &dx)?;
            grads.accumulate(&names::q_proj(l), &g.q_proj)?;
            grads.accumulate(&names::k_proj(l), &g.k_proj)?;
            grads.accumulate(&names::v_proj(l), &g.v_proj)?;
            grads.accumulate(&names::o_proj(l), &g.o_proj)?;
            if let (Some(qn), Some(kn)) = (&g.q_norm, &g.k_norm) {
                grads.accumulate(&names::q_norm(l), qn)?;
                grads.accumulate(&names::k_norm(l), kn)?;
            }
            let d_in = norm_backward(
                &layer.x_in,
                ckpt.get(&names::attn_norm(l))?,
                &layer.attn_inv,
                &g.dx,
                grads.get_mut(&names::attn_norm(l))?,
            );
            dx.add_assign(&d_in);
        }

        let table = grads.get_mut(names::EMBED)?;
        for (t, &tok) in c.tokens.iter().enumerate() {
            for (a, &g) in table.row_mut(tok as usize).iter_mut().zip(dx.row(t)) {
                *a = *a + g;
            }
        }
    }
    Ok((
        LossReport {
            losses,
            routing: routing_log(ckpt, &caches)?,
            tokens: n_tokens,
        },
        grads,
    ))
}

/// Mean next-token cross-entropy and its gradients (auxiliary terms off).
/// The report still carries the balance and z values for MoE models.
pub fn lm_loss_and_grads<T: Scalar>(
    tokens: &[Vec<u32>],
    targets: &[Vec<u32>],
    ckpt: &Checkpoint<T>,
) -> Result<(f64, GradientSet<T>, LossReport)> {
    let (report, grads) = loss_and_grads(ckpt, tokens, targets, AuxCoefficients::NONE)?;
    Ok((report.losses.lm, grads, report))
}

/// Normalized FFN input of every layer for one sequence.
pub(crate) fn ffn_inputs<T: Scalar>(ckpt: &Checkpoint<T>, tokens: &[u32]) -> Result<Vec<Tensor<T>>> {
    Ok(forward_seq(ckpt, tokens)?
        .layers
        .into_iter()
        .map(|l| l.ffn_in)
        .collect())
}

/// Output of layer `l`'s FFN (dense or MoE) applied to `x`.
pub(crate) fn ffn_layer_output<T: Scalar>(ckpt: &Checkpoint<T>, l: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = &ckpt.config;
    if cfg.is_moe() {
        let experts = ckpt.expert_refs(l)?;
        let router = ckpt.get(&names::router(l))?;
        Ok(moe_forward_cached(x, router, &experts, cfg.moe_config()?, cfg.activation)?.0)
    } else {
        Ok(ffn_forward(x, ckpt.dense_ffn(l)?, cfg.activation)?.0)
    }
}
