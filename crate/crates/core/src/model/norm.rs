use crate::kernels::{rms_norm_row, Scalar, Tensor};

/// RMSNorm over rows, keeping the inverse RMS of each row.
pub(crate) fn norm_forward<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let mut out = Tensor::zeros(x.shape());
    let inv = (0..x.rows())
        .map(|r| rms_norm_row(x.row(r), gain.data(), eps, out.row_mut(r)))
        .collect();
    (out, inv)
}

/// Backward of one RMSNorm row: writes `dx`, accumulates into `dgain`.
pub(crate) fn rms_row_backward<T: Scalar>(
    x: &[T],
    gain: &[T],
    inv: T,
    dy: &[T],
    dgain: &mut [T],
    dx: &mut [T],
) {
    let d = T::from_usize(x.len()).expect("dimension fits");
    let mut dot = T::zero();
    for i in 0..x.len() {
        dgain[i] = dgain[i] + dy[i] * x[i] * inv;
        dot = dot + gain[i] * dy[i] * x[i];
    }
    let c = inv * inv * inv * dot / d;
    for i in 0..x.len() {
        dx[i] = inv * gain[i] * dy[i] - x[i] * c;
    }
}

pub(crate) fn norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    inv: &[T],
    dy: &Tensor<T>,
    dgain: &mut Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        rms_row_backward(
            x.row(r),
            gain.data(),
            inv[r],
            dy.row(r),
            dgain.data_mut(),
            dx.row_mut(r),
        );
    }
    dx
}
