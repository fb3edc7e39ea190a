//! Gated feed-forward block `(act(x·W_gate) ⊙ x·W_up) · W_down`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn, relu, silu, silu_grad, Scalar, Tensor};

/// Gate nonlinearity. SiLU gives SwiGLU; ReLU is degree-1 homogeneous and is
/// used to check the weight-scale form of the pseudo-MoE exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu(x),
            Activation::Relu => relu(x),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => silu_grad(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Borrowed gate/up/down triplet.
#[derive(Clone, Copy, Debug)]
pub struct FfnRef<'a, T> {
    pub gate: &'a Tensor<T>,
    pub up: &'a Tensor<T>,
    pub down: &'a Tensor<T>,
}

impl<'a, T: Scalar> FfnRef<'a, T> {
    pub fn check(&self, d_model: usize) -> Result<usize> {
        let (gd, gh) = self.gate.dims2("W_gate")?;
        let (ud, uh) = self.up.dims2("W_up")?;
        let (dh, dd) = self.down.dims2("W_down")?;
        if gd != d_model || ud != d_model || dd != d_model || gh != uh || dh != gh {
            return Err(Error::Dimension(format!(
                "FFN weights gate {:?}, up {:?}, down {:?} inconsistent with d_model {d_model}",
                self.gate.shape(),
                self.up.shape(),
                self.down.shape()
            )));
        }
        Ok(gh)
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct FfnCache<T> {
    pre_gate: Tensor<T>,
    up: Tensor<T>,
    act: Tensor<T>,
    hidden: Tensor<T>,
}

pub(crate) fn ffn_forward<T: Scalar>(
    x: &Tensor<T>,
    w: FfnRef<'_, T>,
    activation: Activation,
) -> Result<(Tensor<T>, FfnCache<T>)> {
    let (_, d) = x.dims2("FFN input")?;
    w.check(d)?;
    let pre_gate = matmul(x, w.gate)?;
    let up = matmul(x, w.up)?;
    let act = pre_gate.map(|v| activation.apply(v));
    let mut hidden = act.clone();
    for (h, &u) in hidden.data_mut().iter_mut().zip(up.data()) {
        *h = *h * u;
    }
    let y = matmul(&hidden, w.down)?;
    Ok((
        y,
        FfnCache {
            pre_gate,
            up,
            act,
            hidden,
        },
    ))
}

pub(crate) struct FfnGrads<T> {
    pub dx: Tensor<T>,
    pub gate: Tensor<T>,
    pub up: Tensor<T>,
    pub down: Tensor<T>,
}

pub(crate) fn ffn_backward<T: Scalar>(
    x: &Tensor<T>,
    w: FfnRef<'_, T>,
    cache: &FfnCache<T>,
    activation: Activation,
    dy: &Tensor<T>,
) -> Result<FfnGrads<T>> {
    let down = matmul_tn(&cache.hidden, dy)?;
    let dhidden = matmul_nt(dy, w.down)?;
    let mut dgate = dhidden.clone();
    let mut dup = dhidden;
    for i in 0..dgate.len() {
        let dh = dgate.data()[i];
        dgate.data_mut()[i] = dh * cache.up.data()[i] * activation.derivative(cache.pre_gate.data()[i]);
        dup.data_mut()[i] = dh * cache.act.data()[i];
    }
    let gate = matmul_tn(x, &dgate)?;
    let up = matmul_tn(x, &dup)?;
    let mut dx = matmul_nt(&dgate, w.gate)?;
    dx.add_assign(&matmul_nt(&dup, w.up)?);
    Ok(FfnGrads { dx, gate, up, down })
}

/// Dense SwiGLU feed-forward: `(silu(h·W_gate) ⊙ h·W_up) · W_down`.
pub fn dense_ffn<T: Scalar>(
    h: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
) -> Result<Tensor<T>> {
    gated_ffn(h, w_gate, w_up, w_down, Activation::Silu)
}

/// Same as [`dense_ffn`] with a selectable gate nonlinearity.
pub fn gated_ffn<T: Scalar>(
    h: &Tensor<T>,
    w_gate: &Tensor<T>,
    w_up: &Tensor<T>,
    w_down: &Tensor<T>,
    activation: Activation,
) -> Result<Tensor<T>> {
    let w = FfnRef {
        gate: w_gate,
        up: w_up,
        down: w_down,
    };
    Ok(ffn_forward(h, w, activation)?.0)
}
