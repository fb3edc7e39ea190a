use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tensor};
use crate::model::{names, Checkpoint, GradientSet};

fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied by the training step.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: default_clip(),
        }
    }
}

/// AdamW moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(ckpt: &Checkpoint<T>, config: AdamWConfig) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = ckpt
            .tensors()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
///
/// Decay skips norm gains. Order per element: `θ -= lr·wd·θ`, update `m` and
/// `v`, then `θ -= lr·m̂/(√v̂ + eps)`.
pub fn adamw_step<T: Scalar>(
    params: &mut Checkpoint<T>,
    grads: &GradientSet<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Optimizer(format!("invalid learning rate {lr}")));
    }
    if grads.len() != params.tensors().len() {
        return Err(Error::Optimizer(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.tensors().len()
        )));
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let (one, eps) = (T::one(), T::from_f64_lossy(c.eps));
    let lr_t = T::from_f64_lossy(lr);
    let wd = T::from_f64_lossy(lr * c.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads
            .tensors()
            .get(name)
            .ok_or_else(|| Error::Optimizer(format!("no gradient for {name}")))?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Optimizer(format!("no optimizer state for {name}")))?;
        let v = state.v.get_mut(name).expect("moments share names");
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::Optimizer(format!(
                "shape mismatch for {name}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let decay = !names::is_norm_gain(name);
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            if decay {
                *pv = *pv - wd * *pv;
            }
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv = *pv - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
