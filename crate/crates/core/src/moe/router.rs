use crate::error::{Error, Result};
use crate::kernels::{softmax_in_place, Scalar, Tensor};
use crate::moe::MoEConfig;

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing<T> {
    /// Selected experts, most probable first; ties go to the lower index.
    pub indices: Vec<usize>,
    /// Mixing weight of each selected expert.
    pub weights: Vec<T>,
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    /// `logsumexp(logits)`.
    pub lse: T,
}

/// Picks the `k` largest probabilities, breaking ties toward the lower index.
pub fn select_top_k<T: Scalar>(probs: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

pub(crate) fn route_logits<T: Scalar>(logits: Vec<T>, cfg: &MoEConfig) -> Routing<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = logits
        .iter()
        .fold(T::zero(), |acc, &l| acc + (l - max).exp());
    let lse = max + sum.ln();
    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    let indices = select_top_k(&probs, cfg.top_k);
    let mut weights: Vec<T> = indices.iter().map(|&i| probs[i]).collect();
    if cfg.norm_topk_prob {
        let s = weights.iter().fold(T::zero(), |a, &w| a + w);
        for w in &mut weights {
            *w = *w / s;
        }
    }
    Routing {
        indices,
        weights,
        logits,
        probs,
        lse,
    }
}

/// Routes a single hidden vector through `router: d_model × E`.
pub fn route<T: Scalar>(h: &[T], router: &Tensor<T>, cfg: &MoEConfig) -> Result<Routing<T>> {
    let (d, e) = router.dims2("router")?;
    if h.len() != d || e != cfg.n_experts {
        return Err(Error::Dimension(format!(
            "hidden of length {} against router {:?} with {} experts",
            h.len(),
            router.shape(),
            cfg.n_experts
        )));
    }
    let mut logits = vec![T::zero(); e];
    for (t, &hv) in h.iter().enumerate() {
        for (l, &r) in logits.iter_mut().zip(router.row(t)) {
            *l = *l + hv * r;
        }
    }
    Ok(route_logits(logits, cfg))
}
