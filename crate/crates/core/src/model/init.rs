use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tensor};
use crate::model::{names, Checkpoint, ModelConfig};

/// Standard deviation of freshly initialized weights.
pub const INIT_STD: f64 = 0.02;

fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut tensors = IndexMap::new();
    for (name, shape) in config.parameter_specs() {
        let t = if names::is_norm_gain(&name) {
            Tensor::full(&shape, T::one())
        } else {
            Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
        };
        tensors.insert(name, t);
    }
    Checkpoint::new(config.clone(), tensors)
}

/// Fresh dense model: weights ~ N(0, 0.02²), norm gains 1.
pub fn init_dense<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    if config.is_moe() {
        return Err(Error::Misuse(
            "init_dense called with an MoE config; use init_moe".into(),
        ));
    }
    init_params(config, seed)
}

/// Fresh MoE model with the same initialization as [`init_dense`], routers included.
pub fn init_moe<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Checkpoint<T>> {
    if !config.is_moe() {
        return Err(Error::Misuse("init_moe called with a dense config".into()));
    }
    init_params(config, seed)
}
