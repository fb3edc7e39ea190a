use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};
use crate::model::ffn::{ffn_backward, ffn_forward, Activation, FfnCache, FfnGrads, FfnRef};
use crate::moe::router::{route_logits, Routing};
use crate::moe::{MoEConfig, MoELayerParams, RoutingLog, RoutingRecord};

pub struct MoeOutput<T> {
    pub y: Tensor<T>,
    pub log: RoutingLog,
    /// Tokens pushed through each expert; zero for experts nobody selected.
    pub evaluations: Vec<usize>,
}

/// Tokens routed to one expert, evaluated as a single batch.
pub(crate) struct ExpertBatch<T> {
    expert: usize,
    tokens: Vec<usize>,
    /// Position of this expert inside each token's selection list.
    slots: Vec<usize>,
    input: Tensor<T>,
    cache: FfnCache<T>,
    out: Tensor<T>,
}

pub(crate) struct MoeCache<T> {
    x: Tensor<T>,
    pub(crate) routes: Vec<Routing<T>>,
    batches: Vec<ExpertBatch<T>>,
}

impl<T: Scalar> MoeCache<T> {
    pub(crate) fn append_log(&self, log: &mut RoutingLog, layer: usize) {
        for (pos, r) in self.routes.iter().enumerate() {
            let full: Vec<f64> = r.probs.iter().map(|p| p.to_f64_lossy()).collect();
            log.push(
                RoutingRecord {
                    layer,
                    pos,
                    experts: r.indices.clone(),
                    probs: r.indices.iter().map(|&i| full[i]).collect(),
                    lse: r.lse.to_f64_lossy(),
                },
                &full,
            );
        }
    }

    pub(crate) fn evaluations(&self, n_experts: usize) -> Vec<usize> {
        let mut ev = vec![0; n_experts];
        for b in &self.batches {
            ev[b.expert] += b.input.rows();
        }
        ev
    }
}

fn check_layer<T: Scalar>(
    x: &Tensor<T>,
    router: &Tensor<T>,
    experts: &[FfnRef<'_, T>],
    cfg: &MoEConfig,
) -> Result<()> {
    cfg.validate()?;
    let (_, d) = x.dims2("MoE input")?;
    let (rd, re) = router.dims2("router")?;
    if rd != d || re != cfg.n_experts || experts.len() != cfg.n_experts {
        return Err(Error::Dimension(format!(
            "router {:?} and {} experts do not fit d_model {d} with {} configured experts",
            router.shape(),
            experts.len(),
            cfg.n_experts
        )));
    }
    for e in experts {
        let h = e.check(d)?;
        if h != cfg.d_expert {
            return Err(Error::Dimension(format!(
                "expert width {h} differs from configured d_expert {}",
                cfg.d_expert
            )));
        }
    }
    Ok(())
}

pub(crate) fn moe_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    router: &Tensor<T>,
    experts: &[FfnRef<'_, T>],
    cfg: &MoEConfig,
    activation: Activation,
) -> Result<(Tensor<T>, MoeCache<T>)> {
    check_layer(x, router, experts, cfg)?;
    let (n_tok, d) = x.dims2("MoE input")?;
    let logits = matmul(x, router)?;
    let routes: Vec<Routing<T>> = (0..n_tok)
        .map(|t| route_logits(logits.row(t).to_vec(), cfg))
        .collect();

    let mut assigned: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); cfg.n_experts];
    for (t, r) in routes.iter().enumerate() {
        for (slot, &e) in r.indices.iter().enumerate() {
            assigned[e].0.push(t);
            assigned[e].1.push(slot);
        }
    }

    // Experts are visited in ascending index order, so each token's sum
    // accumulates its selected experts in ascending index order too.
    let mut acc = Tensor::zeros(&[n_tok, d]);
    let mut batches = Vec::new();
    for (e, (tokens, slots)) in assigned.into_iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let mut input = Vec::with_capacity(tokens.len() * d);
        for &t in &tokens {
            input.extend_from_slice(x.row(t));
        }
        let input = Tensor::new(vec![tokens.len(), d], input)?;
        let (out, cache) = ffn_forward(&input, experts[e], activation)?;
        for (i, (&t, &slot)) in tokens.iter().zip(&slots).enumerate() {
            let w = routes[t].weights[slot];
            for (a, &o) in acc.row_mut(t).iter_mut().zip(out.row(i)) {
                *a = *a + w * o;
            }
        }
        batches.push(ExpertBatch {
            expert: e,
            tokens,
            slots,
            input,
            cache,
            out,
        });
    }
    let m = T::from_f64_lossy(cfg.output_multiplier);
    let y = acc.scale(m);
    Ok((
        y,
        MoeCache {
            x: x.clone(),
            routes,
            batches,
        },
    ))
}

/// Extra gradient terms from the auxiliary losses, added per token.
pub(crate) struct MoeAuxGrad<T> {
    /// Added to `∂L/∂pᵢ` of every token (balance loss).
    pub dprob: Vec<T>,
    /// `∂L/∂lse` of every token (z-loss).
    pub dlse: Vec<T>,
}

pub(crate) struct MoeGrads<T> {
    pub dx: Tensor<T>,
    pub router: Tensor<T>,
    pub experts: Vec<Option<FfnGrads<T>>>,
}

pub(crate) fn moe_backward<T: Scalar>(
    cache: &MoeCache<T>,
    router: &Tensor<T>,
    experts: &[FfnRef<'_, T>],
    cfg: &MoEConfig,
    activation: Activation,
    dy: &Tensor<T>,
    aux: Option<&MoeAuxGrad<T>>,
) -> Result<MoeGrads<T>> {
    let (n_tok, d) = cache.x.dims2("MoE input")?;
    let e_total = cfg.n_experts;
    let m = T::from_f64_lossy(cfg.output_multiplier);
    let dacc = dy.scale(m);

    let mut dx = Tensor::zeros(&[n_tok, d]);
    let mut dweights: Vec<Vec<T>> = cache
        .routes
        .iter()
        .map(|r| vec![T::zero(); r.indices.len()])
        .collect();
    let mut expert_grads: Vec<Option<FfnGrads<T>>> = (0..e_total).map(|_| None).collect();

    for b in &cache.batches {
        let mut dout = Tensor::zeros(b.out.shape());
        for (i, (&t, &slot)) in b.tokens.iter().zip(&b.slots).enumerate() {
            let w = cache.routes[t].weights[slot];
            let g = dacc.row(t);
            dweights[t][slot] = g
                .iter()
                .zip(b.out.row(i))
                .fold(T::zero(), |a, (&gv, &o)| a + gv * o);
            for (dv, &gv) in dout.row_mut(i).iter_mut().zip(g) {
                *dv = w * gv;
            }
        }
        let grads = ffn_backward(&b.input, experts[b.expert], &b.cache, activation, &dout)?;
        for (i, &t) in b.tokens.iter().enumerate() {
            for (a, &v) in dx.row_mut(t).iter_mut().zip(grads.dx.row(i)) {
                *a = *a + v;
            }
        }
        expert_grads[b.expert] = Some(grads);
    }

    let mut dlogits = Tensor::zeros(&[n_tok, e_total]);
    for (t, r) in cache.routes.iter().enumerate() {
        let mut dp = vec![T::zero(); e_total];
        if cfg.norm_topk_prob {
            let s = r.indices.iter().fold(T::zero(), |a, &i| a + r.probs[i]);
            let inner = r
                .weights
                .iter()
                .zip(&dweights[t])
                .fold(T::zero(), |a, (&w, &dw)| a + w * dw);
            for (slot, &i) in r.indices.iter().enumerate() {
                dp[i] = (dweights[t][slot] - inner) / s;
            }
        } else {
            for (slot, &i) in r.indices.iter().enumerate() {
                dp[i] = dweights[t][slot];
            }
        }
        if let Some(aux) = aux {
            for (a, &b) in dp.iter_mut().zip(&aux.dprob) {
                *a = *a + b;
            }
        }
        let dot = dp
            .iter()
            .zip(&r.probs)
            .fold(T::zero(), |a, (&g, &p)| a + g * p);
        let dl = dlogits.row_mut(t);
        for i in 0..e_total {
            dl[i] = r.probs[i] * (dp[i] - dot);
        }
        if let Some(aux) = aux {
            // ∂lse/∂logit = softmax
            let g = aux.dlse[t];
            for i in 0..e_total {
                dl[i] = dl[i] + g * r.probs[i];
            }
        }
    }
    let router_grad = matmul_tn(&cache.x, &dlogits)?;
    dx.add_assign(&matmul_nt(&dlogits, router)?);
    Ok(MoeGrads {
        dx,
        router: router_grad,
        experts: expert_grads,
    })
}

/// MoE layer forward with SiLU experts. The returned log records layer 0.
pub fn moe_forward<T: Scalar>(
    h: &Tensor<T>,
    params: &MoELayerParams<T>,
    cfg: &MoEConfig,
) -> Result<MoeOutput<T>> {
    moe_forward_with(h, params, cfg, Activation::Silu)
}

pub fn moe_forward_with<T: Scalar>(
    h: &Tensor<T>,
    params: &MoELayerParams<T>,
    cfg: &MoEConfig,
    activation: Activation,
) -> Result<MoeOutput<T>> {
    let refs = params.expert_refs();
    let (y, cache) = moe_forward_cached(h, &params.router, &refs, cfg, activation)?;
    let mut log = RoutingLog::new(cfg.n_experts, cfg.top_k);
    cache.append_log(&mut log, 0);
    let evaluations = cache.evaluations(cfg.n_experts);
    Ok(MoeOutput { y, log, evaluations })
}
