//! Causal grouped-query attention with optional per-head QK RMSNorm and RoPE.

use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn, rms_norm_row, rope_rotate_row, Scalar, Tensor};
use crate::model::norm::rms_row_backward;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a, T> {
    /// `d_model × n_q_heads·d_head`
    pub q_proj: &'a Tensor<T>,
    /// `d_model × n_kv_heads·d_head`
    pub k_proj: &'a Tensor<T>,
    pub v_proj: &'a Tensor<T>,
    /// `n_q_heads·d_head × d_model`
    pub o_proj: &'a Tensor<T>,
    pub q_norm: Option<&'a Tensor<T>>,
    pub k_norm: Option<&'a Tensor<T>>,
}

pub(crate) struct AttnCache<T> {
    input: Tensor<T>,
    positions: Vec<usize>,
    q_raw: Tensor<T>,
    k_raw: Tensor<T>,
    q_inv: Vec<T>,
    k_inv: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Per query head, a `T × T` row-stochastic causal matrix.
    probs: Vec<Vec<T>>,
    ctx: Tensor<T>,
}

pub(crate) struct AttnGrads<T> {
    pub dx: Tensor<T>,
    pub q_proj: Tensor<T>,
    pub k_proj: Tensor<T>,
    pub v_proj: Tensor<T>,
    pub o_proj: Tensor<T>,
    pub q_norm: Option<Tensor<T>>,
    pub k_norm: Option<Tensor<T>>,
}

fn check<T: Scalar>(
    h: &Tensor<T>,
    w: &AttentionWeights<'_, T>,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<()> {
    let (t, d) = h.dims2("attention input")?;
    let want = [
        (w.q_proj, [cfg.d_model, cfg.q_width()]),
        (w.k_proj, [cfg.d_model, cfg.kv_width()]),
        (w.v_proj, [cfg.d_model, cfg.kv_width()]),
        (w.o_proj, [cfg.q_width(), cfg.d_model]),
    ];
    if d != cfg.d_model || want.iter().any(|(t, s)| t.shape() != s) {
        return Err(Error::Dimension(format!(
            "attention weights q {:?} k {:?} v {:?} o {:?} do not fit input {:?}",
            w.q_proj.shape(),
            w.k_proj.shape(),
            w.v_proj.shape(),
            w.o_proj.shape(),
            h.shape()
        )));
    }
    if positions.len() != t {
        return Err(Error::Dimension(format!(
            "{} positions for {t} tokens",
            positions.len()
        )));
    }
    if cfg.qk_norm != (w.q_norm.is_some() && w.k_norm.is_some()) {
        return Err(Error::Config("QK-norm gains must match the qk_norm flag".into()));
    }
    Ok(())
}

/// Per-head RMSNorm over every `d_head` chunk of `x`, in place; returns inverse RMS values.
fn head_norm<T: Scalar>(x: &mut Tensor<T>, gain: &Tensor<T>, d_head: usize, eps: T) -> Vec<T> {
    let mut inv = Vec::with_capacity(x.len() / d_head);
    let mut buf = vec![T::zero(); d_head];
    for chunk in x.data_mut().chunks_exact_mut(d_head) {
        inv.push(rms_norm_row(chunk, gain.data(), eps, &mut buf));
        chunk.copy_from_slice(&buf);
    }
    inv
}

pub(crate) fn attention_forward<T: Scalar>(
    h: &Tensor<T>,
    w: &AttentionWeights<'_, T>,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, AttnCache<T>)> {
    check(h, w, positions, cfg)?;
    let (n, _) = h.dims2("attention input")?;
    let dh = cfg.d_head;
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let q_raw = matmul(h, w.q_proj)?;
    let k_raw = matmul(h, w.k_proj)?;
    let v = matmul(h, w.v_proj)?;
    let mut q = q_raw.clone();
    let mut k = k_raw.clone();
    let (mut q_inv, mut k_inv) = (Vec::new(), Vec::new());
    if let (Some(qg), Some(kg)) = (w.q_norm, w.k_norm) {
        q_inv = head_norm(&mut q, qg, dh, eps);
        k_inv = head_norm(&mut k, kg, dh, eps);
    }
    for (t, &pos) in positions.iter().enumerate() {
        rope_rotate_row(q.row_mut(t), pos, dh, cfg.rope_theta, false);
        rope_rotate_row(k.row_mut(t), pos, dh, cfg.rope_theta, false);
    }

    let group = cfg.n_q_heads / cfg.n_kv_heads;
    let scale = T::one() / T::from_usize(dh).expect("d_head fits").sqrt();
    let (qw, kw) = (cfg.q_width(), cfg.kv_width());
    let mut ctx = Tensor::zeros(&[n, qw]);
    let mut probs = Vec::with_capacity(cfg.n_q_heads);
    for head in 0..cfg.n_q_heads {
        let kvh = head / group;
        let mut p = vec![T::zero(); n * n];
        for t in 0..n {
            let qrow = &q.data()[t * qw + head * dh..t * qw + (head + 1) * dh];
            let row = &mut p[t * n..t * n + t + 1];
            for (u, s) in row.iter_mut().enumerate() {
                let krow = &k.data()[u * kw + kvh * dh..u * kw + (kvh + 1) * dh];
                *s = qrow
                    .iter()
                    .zip(krow)
                    .fold(T::zero(), |a, (&x, &y)| a + x * y)
                    * scale;
            }
            crate::kernels::softmax_in_place(row);
            let out = &mut ctx.data_mut()[t * qw + head * dh..t * qw + (head + 1) * dh];
            for (u, &pu) in p[t * n..t * n + t + 1].iter().enumerate() {
                let vrow = &v.data()[u * kw + kvh * dh..u * kw + (kvh + 1) * dh];
                for (o, &vv) in out.iter_mut().zip(vrow) {
                    *o = *o + pu * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = matmul(&ctx, w.o_proj)?;
    Ok((
        out,
        AttnCache {
            input: h.clone(),
            positions: positions.to_vec(),
            q_raw,
            k_raw,
            q_inv,
            k_inv,
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

pub(crate) fn attention_backward<T: Scalar>(
    cache: &AttnCache<T>,
    w: &AttentionWeights<'_, T>,
    cfg: &ModelConfig,
    dout: &Tensor<T>,
) -> Result<AttnGrads<T>> {
    let n = cache.positions.len();
    let dh = cfg.d_head;
    let (qw, kw) = (cfg.q_width(), cfg.kv_width());
    let group = cfg.n_q_heads / cfg.n_kv_heads;
    let scale = T::one() / T::from_usize(dh).expect("d_head fits").sqrt();

    let o_proj = matmul_tn(&cache.ctx, dout)?;
    let dctx = matmul_nt(dout, w.o_proj)?;
    let mut dq = Tensor::zeros(&[n, qw]);
    let mut dk = Tensor::zeros(&[n, kw]);
    let mut dv = Tensor::zeros(&[n, kw]);
    let mut ds = vec![T::zero(); n];
    for head in 0..cfg.n_q_heads {
        let kvh = head / group;
        let p = &cache.probs[head];
        for t in 0..n {
            let go = &dctx.data()[t * qw + head * dh..t * qw + (head + 1) * dh];
            let prow = &p[t * n..t * n + t + 1];
            let mut dot = T::zero();
            for u in 0..=t {
                let vrow = &cache.v.data()[u * kw + kvh * dh..u * kw + (kvh + 1) * dh];
                let dp = go.iter().zip(vrow).fold(T::zero(), |a, (&g, &vv)| a + g * vv);
                ds[u] = dp;
                dot = dot + dp * prow[u];
                let dvrow = &mut dv.data_mut()[u * kw + kvh * dh..u * kw + (kvh + 1) * dh];
                for (d, &g) in dvrow.iter_mut().zip(go) {
                    *d = *d + prow[u] * g;
                }
            }
            for u in 0..=t {
                let dsu = prow[u] * (ds[u] - dot) * scale;
                if dsu == T::zero() {
                    continue;
                }
                let qrow = &cache.q.data()[t * qw + head * dh..t * qw + (head + 1) * dh];
                let krow = &cache.k.data()[u * kw + kvh * dh..u * kw + (kvh + 1) * dh];
                let dqrow = &mut dq.data_mut()[t * qw + head * dh..t * qw + (head + 1) * dh];
                for (d, &kv) in dqrow.iter_mut().zip(krow) {
                    *d = *d + dsu * kv;
                }
                let dkrow = &mut dk.data_mut()[u * kw + kvh * dh..u * kw + (kvh + 1) * dh];
                for (d, &qv) in dkrow.iter_mut().zip(qrow) {
                    *d = *d + dsu * qv;
                }
            }
        }
    }
    for (t, &pos) in cache.positions.iter().enumerate() {
        rope_rotate_row(dq.row_mut(t), pos, dh, cfg.rope_theta, true);
        rope_rotate_row(dk.row_mut(t), pos, dh, cfg.rope_theta, true);
    }
    let (mut q_norm, mut k_norm) = (None, None);
    if let (Some(qg), Some(kg)) = (w.q_norm, w.k_norm) {
        let mut gq = Tensor::zeros(&[dh]);
        let mut gk = Tensor::zeros(&[dh]);
        head_norm_backward(&mut dq, &cache.q_raw, qg, &cache.q_inv, dh, gq.data_mut());
        head_norm_backward(&mut dk, &cache.k_raw, kg, &cache.k_inv, dh, gk.data_mut());
        q_norm = Some(gq);
        k_norm = Some(gk);
    }
    let q_proj = matmul_tn(&cache.input, &dq)?;
    let k_proj = matmul_tn(&cache.input, &dk)?;
    let v_proj = matmul_tn(&cache.input, &dv)?;
    let mut dx = matmul_nt(&dq, w.q_proj)?;
    dx.add_assign(&matmul_nt(&dk, w.k_proj)?);
    dx.add_assign(&matmul_nt(&dv, w.v_proj)?);
    Ok(AttnGrads {
        dx,
        q_proj,
        k_proj,
        v_proj,
        o_proj,
        q_norm,
        k_norm,
    })
}

fn head_norm_backward<T: Scalar>(
    dy: &mut Tensor<T>,
    x: &Tensor<T>,
    gain: &Tensor<T>,
    inv: &[T],
    d_head: usize,
    dgain: &mut [T],
) {
    let mut dx = vec![T::zero(); d_head];
    for ((dchunk, xchunk), &r) in dy
        .data_mut()
        .chunks_exact_mut(d_head)
        .zip(x.data().chunks_exact(d_head))
        .zip(inv)
    {
        rms_row_backward(xchunk, gain.data(), r, dchunk, dgain, &mut dx);
        dchunk.copy_from_slice(&dx);
    }
}

/// Causal GQA over `h: T × d_model` (already normalized), returning `T × d_model`.
pub fn gqa_attention<T: Scalar>(
    h: &Tensor<T>,
    weights: &AttentionWeights<'_, T>,
    positions: &[usize],
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    Ok(attention_forward(h, weights, positions, config)?.0)
}
