use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::{forward_logits, Checkpoint};
use crate::moe::RoutingLog;

/// Share of a language's tokens that activate each expert, per layer.
///
/// An activation is membership in a token's top-k set, so every layer row
/// sums to k.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationMatrix {
    pub language: String,
    pub layers: usize,
    pub experts: usize,
    pub n_tokens: u64,
    /// Row-major `layers × experts`.
    pub matrix: Vec<f64>,
}

impl SpecializationMatrix {
    /// Divides integer activation counts (`counts[layer][expert]`) by the token count.
    pub fn from_counts(language: &str, counts: &[Vec<u64>], n_tokens: u64) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::Input(format!("language {language} has no tokens")));
        }
        let experts = counts.first().map_or(0, Vec::len);
        if experts == 0 || counts.iter().any(|r| r.len() != experts) {
            return Err(Error::Input("activation counts must form a non-empty rectangle".into()));
        }
        let n = n_tokens as f64;
        Ok(Self {
            language: language.to_string(),
            layers: counts.len(),
            experts,
            n_tokens,
            matrix: counts.iter().flatten().map(|&c| c as f64 / n).collect(),
        })
    }

    /// Signature of the tokens recorded in `log`, one row per routed layer.
    pub fn from_routing_log(language: &str, log: &RoutingLog) -> Result<Self> {
        let counts = log.recount();
        let per_layer: Vec<u64> = log.routed_layers().map(|l| log.layers[l].tokens).collect();
        let n_tokens = per_layer.first().copied().unwrap_or(0);
        if per_layer.iter().any(|&t| t != n_tokens) {
            return Err(Error::Input("routing log layers saw different token counts".into()));
        }
        let rows: Vec<Vec<u64>> = log.routed_layers().map(|l| counts[l].clone()).collect();
        Self::from_counts(language, &rows, n_tokens)
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.matrix[layer * self.experts..(layer + 1) * self.experts]
    }

    /// Integer activation counts recovered from the shares.
    pub fn counts(&self) -> Vec<Vec<u64>> {
        let n = self.n_tokens as f64;
        (0..self.layers)
            .map(|l| self.row(l).iter().map(|&v| (v * n).round() as u64).collect())
            .collect()
    }

    /// Activations per token in `layer`: the count total with a single division.
    pub fn layer_sum(&self, layer: usize) -> f64 {
        let total: u64 = self.counts()[layer].iter().sum();
        total as f64 / self.n_tokens as f64
    }
}

/// Routes every document through `ckpt` and counts expert activations.
pub fn collect_signature<T: Scalar>(
    ckpt: &Checkpoint<T>,
    language: &str,
    docs: &[Vec<u32>],
) -> Result<SpecializationMatrix> {
    let moe = ckpt
        .config
        .moe_config()
        .map_err(|_| Error::Misuse("expert signatures need an MoE checkpoint".into()))?;
    if docs.iter().all(Vec::is_empty) {
        return Err(Error::Input(format!("no tokens for language {language}")));
    }
    let mut counts = vec![vec![0u64; moe.n_experts]; ckpt.config.n_layers];
    let mut n_tokens = 0u64;
    for doc in docs.iter().filter(|d| !d.is_empty()) {
        let log = forward_logits(doc, ckpt)?
            .routing
            .ok_or_else(|| Error::Misuse("checkpoint produced no routing".into()))?;
        for (acc, stats) in counts.iter_mut().zip(&log.layers) {
            for (a, c) in acc.iter_mut().zip(&stats.counts) {
                *a += c;
            }
        }
        n_tokens += doc.len() as u64;
    }
    SpecializationMatrix::from_counts(language, &counts, n_tokens)
}

/// Indices of `n` documents drawn without replacement, in ascending order.
/// Returns every index when fewer than `n` documents exist.
pub fn sample_documents(n_docs: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= n_docs {
        return (0..n_docs).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n_docs, n).into_vec();
    picked.sort_unstable();
    picked
}
