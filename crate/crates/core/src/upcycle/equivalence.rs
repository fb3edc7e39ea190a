use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Scalar;
use crate::model::{ffn_inputs, ffn_layer_output, forward_logits, Checkpoint, ModelConfig};

/// Largest admissible final-logit difference for a passing report.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;
/// Tokens per probe sequence.
pub const PROBE_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// Per layer, the largest |Δ| between the two FFN blocks fed the same input.
    pub ffn_max_abs: Vec<f64>,
    pub logits_max_abs: f64,
    /// `logits_max_abs` divided by the largest |logit| of the reference model.
    pub logits_max_rel: f64,
    pub precision: String,
    pub probes: usize,
    pub probe_len: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub passed: bool,
}

fn same_geometry(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.n_layers == b.n_layers
        && a.d_model == b.d_model
        && a.n_q_heads == b.n_q_heads
        && a.n_kv_heads == b.n_kv_heads
        && a.d_head == b.d_head
        && a.vocab_size == b.vocab_size
        && a.rope_theta == b.rope_theta
        && a.norm_eps == b.norm_eps
        && a.tie_embeddings == b.tie_embeddings
        && a.qk_norm == b.qk_norm
        && a.activation == b.activation
}

/// Runs both models in double precision on `n_probe` random sequences and
/// reports the worst FFN-block and final-logit differences.
pub fn verify_equivalence<T: Scalar, U: Scalar>(
    reference: &Checkpoint<T>,
    candidate: &Checkpoint<U>,
    n_probe: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let a: Checkpoint<f64> = reference.cast();
    let b: Checkpoint<f64> = candidate.cast();
    if !same_geometry(&a.config, &b.config) {
        return Err(Error::Comparison(
            "models differ outside their feed-forward blocks".into(),
        ));
    }
    for (name, t) in a.tensors() {
        if name.contains(".ffn.") || name.contains(".moe.") {
            continue;
        }
        if b.get(name).ok() != Some(t) {
            return Err(Error::Comparison(format!(
                "shared tensor {name} differs between the models"
            )));
        }
    }
    if n_probe == 0 {
        return Err(Error::Input("at least one probe sequence is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = a.config.vocab_size as u32;
    let mut ffn_max_abs = vec![0.0f64; a.config.n_layers];
    let (mut max_abs, mut max_ref) = (0.0f64, 0.0f64);
    for _ in 0..n_probe {
        let tokens: Vec<u32> = (0..PROBE_LEN).map(|_| rng.random_range(0..vocab)).collect();
        for (l, x) in ffn_inputs(&a, &tokens)?.iter().enumerate() {
            let ya = ffn_layer_output(&a, l, x)?;
            let yb = ffn_layer_output(&b, l, x)?;
            ffn_max_abs[l] = ffn_max_abs[l].max(ya.max_abs_diff(&yb));
        }
        let la = forward_logits(&tokens, &a)?.logits;
        let lb = forward_logits(&tokens, &b)?.logits;
        max_abs = max_abs.max(la.max_abs_diff(&lb));
        max_ref = max_ref.max(la.max_abs());
    }
    let logits_max_rel = if max_ref > 0.0 { max_abs / max_ref } else { max_abs };
    Ok(EquivalenceReport {
        ffn_max_abs,
        logits_max_abs: max_abs,
        logits_max_rel,
        precision: "f64".into(),
        probes: n_probe,
        probe_len: PROBE_LEN,
        seed,
        tolerance: EQUIVALENCE_TOLERANCE,
        passed: max_abs <= EQUIVALENCE_TOLERANCE,
    })
}
