use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tensor};
use crate::model::ffn::FfnRef;
use crate::model::{names, ModelConfig};
use crate::moe::{ExpertWeights, MoELayerParams};

/// Named parameter tensors of one model, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Validates names and shapes against `config` and reorders canonically.
    pub fn new(config: ModelConfig, mut tensors: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.parameter_specs();
        let mut ordered = IndexMap::with_capacity(specs.len());
        for (name, shape) in specs {
            let t = tensors
                .swap_remove(&name)
                .ok_or_else(|| Error::Input(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "tensor {name} has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Input(format!("tensor {name} holds non-finite values")));
            }
            ordered.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Input(format!(
                "checkpoint has tensor {extra} not required by its config"
            )));
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("no tensor named {name}")))
    }

    /// Mutable access for in-place updates; the shape must not change.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("no tensor named {name}")))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Output projection, `vocab × d_model`: the embedding when tied.
    pub fn output_projection(&self) -> Result<&Tensor<T>> {
        if self.config.tie_embeddings {
            self.get(names::EMBED)
        } else {
            self.get(names::LM_HEAD)
        }
    }

    pub fn dense_ffn(&self, layer: usize) -> Result<FfnRef<'_, T>> {
        if self.config.is_moe() {
            return Err(Error::Misuse("dense FFN requested from an MoE checkpoint".into()));
        }
        Ok(FfnRef {
            gate: self.get(&names::ffn_gate(layer))?,
            up: self.get(&names::ffn_up(layer))?,
            down: self.get(&names::ffn_down(layer))?,
        })
    }

    pub fn expert_refs(&self, layer: usize) -> Result<Vec<FfnRef<'_, T>>> {
        let moe = self.config.moe_config()?;
        (0..moe.n_experts)
            .map(|e| {
                Ok(FfnRef {
                    gate: self.get(&names::expert_gate(layer, e))?,
                    up: self.get(&names::expert_up(layer, e))?,
                    down: self.get(&names::expert_down(layer, e))?,
                })
            })
            .collect()
    }

    /// Owned copy of one MoE layer's router and experts.
    pub fn moe_layer(&self, layer: usize) -> Result<MoELayerParams<T>> {
        let experts = self
            .expert_refs(layer)?
            .into_iter()
            .map(|r| ExpertWeights {
                gate: r.gate.clone(),
                up: r.up.clone(),
                down: r.down.clone(),
            })
            .collect();
        Ok(MoELayerParams {
            router: self.get(&names::router(layer))?.clone(),
            experts,
        })
    }

    /// Largest absolute difference over all tensors; both must share a config.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.config != other.config {
            return Err(Error::Comparison("checkpoints have different configs".into()));
        }
        Ok(self
            .tensors
            .iter()
            .map(|(k, v)| v.max_abs_diff(&other.tensors[k]))
            .fold(0.0, f64::max))
    }
}

/// One gradient tensor per trainable parameter, same names as the checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros_like(ckpt: &Checkpoint<T>) -> Self {
        Self {
            tensors: ckpt
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("no gradient named {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds `g` into the named gradient.
    pub(crate) fn accumulate(&mut self, name: &str, g: &Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("no gradient named {name}")))?;
        if slot.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient for {name} has shape {:?}, expected {:?}",
                g.shape(),
                slot.shape()
            )));
        }
        slot.add_assign(g);
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("no gradient named {name}")))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}
