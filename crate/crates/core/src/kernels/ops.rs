use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tensor};

/// `a · b` for `a: m×k`, `b: k×n`.
///
/// Each output element accumulates over `t` in ascending order, so a naive
/// triple loop with the same order reproduces it bit for bit.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let c = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let av = ad[i * k + t];
            let brow = &bd[t * n..(t + 1) * n];
            for (cj, &bj) in c.iter_mut().zip(brow) {
                *cj = *cj + av * bj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn lhs")?;
    let (k2, n) = b.dims2("matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_tn leading dimensions disagree: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for t in 0..k {
        let brow = &bd[t * n..(t + 1) * n];
        for i in 0..m {
            let av = ad[t * m + i];
            if av == T::zero() {
                continue;
            }
            let c = &mut out[i * n..(i + 1) * n];
            for (cj, &bj) in c.iter_mut().zip(brow) {
                *cj = *cj + av * bj;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt lhs")?;
    let (n, k2) = b.dims2("matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt trailing dimensions disagree: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax of one slice, in place.
pub fn softmax_in_place<T: Scalar>(x: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax over the last axis.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Writes `x / sqrt(mean(x²) + eps) ⊙ gamma` into `out` and returns the inverse RMS.
pub fn rms_norm_row<T: Scalar>(x: &[T], gamma: &[T], eps: T, out: &mut [T]) -> T {
    let d = T::from_usize(x.len()).expect("dimension fits the scalar type");
    let ms = x.iter().fold(T::zero(), |acc, &v| acc + v * v) / d;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gamma) {
        *o = v * inv * g;
    }
    inv
}

/// RMSNorm over the last axis.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if gamma.len() != x.last_dim() {
        return Err(Error::Dimension(format!(
            "rms_norm gain of length {} does not match last axis of {:?}",
            gamma.len(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        rms_norm_row(x.row(r), gamma.data(), eps, out.row_mut(r));
    }
    Ok(out)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// d silu / dx.
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Rotates every `d_head`-sized head of `row` by the angles for `pos`.
///
/// Half-split pairing: element `i` rotates with `i + d_head/2`, frequency
/// `theta^(-2i/d_head)`. `inverse` applies the transposed rotation, which is
/// the backward pass of the forward one.
pub fn rope_rotate_row<T: Scalar>(row: &mut [T], pos: usize, d_head: usize, theta: f64, inverse: bool) {
    let half = d_head / 2;
    for head in row.chunks_exact_mut(d_head) {
        for i in 0..half {
            let freq = theta.powf(-2.0 * i as f64 / d_head as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::from_f64_lossy(if inverse { -s } else { s }), T::from_f64_lossy(c));
            let (x0, x1) = (head[i], head[i + half]);
            head[i] = x0 * c - x1 * s;
            head[i + half] = x0 * s + x1 * c;
        }
    }
}

/// Applies RoPE to query and key activations laid out as `T × (heads·d_head)`.
pub fn rope_apply<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    positions: &[usize],
    d_head: usize,
    theta_base: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return Err(Error::Config(format!("RoPE needs an even head dimension, got {d_head}")));
    }
    let (tq, wq) = q.dims2("rope query")?;
    let (tk, wk) = k.dims2("rope key")?;
    if tq != positions.len() || tk != positions.len() {
        return Err(Error::Dimension(format!(
            "{} positions for query {:?} and key {:?}",
            positions.len(),
            q.shape(),
            k.shape()
        )));
    }
    if wq % d_head != 0 || wk % d_head != 0 {
        return Err(Error::Dimension(format!(
            "head dimension {d_head} does not divide widths {wq} and {wk}"
        )));
    }
    let (mut q, mut k) = (q.clone(), k.clone());
    for (t, &pos) in positions.iter().enumerate() {
        rope_rotate_row(q.row_mut(t), pos, d_head, theta_base, false);
        rope_rotate_row(k.row_mut(t), pos, d_head, theta_base, false);
    }
    Ok((q, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = t64(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t64(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&i2, &a).unwrap(), a);
        let b = t64(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            t64(&[&[19.0, 22.0], &[43.0, 50.0]])
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = Tensor::<f64>::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[4, 5], |i| (i as f64 * 0.11).cos());
        let at = Tensor::from_fn(&[3, 4], |idx| a.get2(idx % 4, idx / 4));
        assert!(matmul_tn(&a, &b).unwrap().max_abs_diff(&matmul(&at, &b).unwrap()) < 1e-14);
        let c = Tensor::<f64>::from_fn(&[5, 3], |i| (i as f64 * 0.23).sin());
        let ct = Tensor::from_fn(&[3, 5], |idx| c.get2(idx % 5, idx / 5));
        assert!(matmul_nt(&a, &c).unwrap().max_abs_diff(&matmul(&a, &ct).unwrap()) < 1e-14);
    }

    #[test]
    fn softmax_uniform_and_large_values() {
        let s = softmax_rows(&Tensor::<f64>::zeros(&[1, 4]));
        assert!(s.data().iter().all(|&v| v == 0.25));
        let s = softmax_rows(&t64(&[&[1000.0, 0.0]]));
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn rms_norm_unit_cases() {
        let g = Tensor::<f64>::full(&[4], 1.0);
        let y = rms_norm(&Tensor::full(&[1, 4], 1.0), &g, 1e-30).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let g = Tensor::<f64>::full(&[2], 1.0);
        let y = rms_norm(&t64(&[&[3.0, -3.0]]), &g, 1e-30).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
        assert!(rms_norm(&t64(&[&[3.0, -3.0]]), &Tensor::full(&[3], 1.0), 1e-6).is_err());
    }

    #[test]
    fn silu_asymptotes() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(40.0f64) - 40.0).abs() < 1e-12);
        assert!(silu(-40.0f64).abs() < 1e-12);
        assert_eq!(relu(-1.0f64), 0.0);
        assert_eq!(relu(2.5f64), 2.5);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let q = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            rope_apply(&q, &q, &[0], 3, 10000.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let q = Tensor::<f64>::from_fn(&[1, 8], |i| i as f64 - 3.5);
        let k = Tensor::<f64>::from_fn(&[1, 4], |i| i as f64 * 0.5);
        let (rq, rk) = rope_apply(&q, &k, &[0], 4, 10000.0).unwrap();
        assert_eq!(rq, q);
        assert_eq!(rk, k);
    }
}
