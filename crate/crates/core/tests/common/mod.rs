#![allow(dead_code)]

use std::collections::BTreeSet;

use finemoe::atlas::{correlation_matrix, CorrelationMatrix, Dendrogram, SpecializationMatrix};
use finemoe::kernels::Tensor;
use finemoe::model::{evaluate_loss, init_dense, init_moe, names, AuxCoefficients, FfnKind, ModelConfig};
use finemoe::moe::{MoEConfig, RoutingLog, RoutingRecord};
use finemoe::{Checkpoint, GradientSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 2-layer model small enough for exhaustive finite differences.
pub fn grad_check_config(moe: bool) -> ModelConfig {
    let mut c = ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_ffn: 8,
        n_q_heads: 2,
        n_kv_heads: 1,
        d_head: 4,
        vocab_size: 32,
        rope_theta: 10000.0,
        norm_eps: 1e-6,
        tie_embeddings: true,
        qk_norm: true,
        activation: Default::default(),
        ffn_kind: FfnKind::Dense,
        moe: None,
    };
    if moe {
        c = c.with_moe(MoEConfig {
            d_expert: 4,
            n_experts: 4,
            top_k: 2,
            output_multiplier: 1.0,
            norm_topk_prob: false,
        });
    }
    c
}

/// Random model with weights large enough that the signal is not dominated by noise.
pub fn random_model(config: &ModelConfig, seed: u64, std: f64) -> Checkpoint<f64> {
    let mut ckpt: Checkpoint<f64> = if config.is_moe() {
        init_moe(config, seed).unwrap()
    } else {
        init_dense(config, seed).unwrap()
    };
    let scale = std / finemoe::model::INIT_STD;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    for (name, t) in ckpt.iter_mut() {
        if names::is_norm_gain(name) {
            for v in t.data_mut() {
                *v = 1.0 + rng.random_range(-0.3..0.3);
            }
        } else {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    ckpt
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

pub fn random_batch(seed: u64, vocab: usize, n: usize, len: usize) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<u32>> = (0..n).map(|_| random_tokens(&mut rng, vocab, len + 1)).collect();
    (
        seqs.iter().map(|s| s[..len].to_vec()).collect(),
        seqs.iter().map(|s| s[1..].to_vec()).collect(),
    )
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a floor so gradients near zero are judged absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central differences of the total loss against analytic gradients, every parameter.
pub fn finite_difference_check(
    ckpt: &Checkpoint<f64>,
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
    coeffs: AuxCoefficients,
    grads: &GradientSet<f64>,
    step: f64,
) -> GradCheck {
    let mut probe = ckpt.clone();
    let names: Vec<String> = ckpt.tensors().keys().cloned().collect();
    let mut out = GradCheck {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for name in names {
        let n = ckpt.get(&name).unwrap().len();
        for i in 0..n {
            let orig = ckpt.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let lp = evaluate_loss(&probe, inputs, targets, coeffs).unwrap().losses.total;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let lm = evaluate_loss(&probe, inputs, targets, coeffs).unwrap().losses.total;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads.get(&name).unwrap().data()[i];
            let e = rel_err(analytic, numeric);
            if e > out.max_rel {
                out.max_rel = e;
                out.worst = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
            }
            out.checked += 1;
        }
    }
    out
}

// Gated FFN

pub fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Tensor<f64> {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(&[r, c], |_| n.sample(rng))
}

/// Direct loop evaluation of the gated FFN, independent of the matmul kernel.
pub fn ffn_oracle(x: &[f64], g: &Tensor<f64>, u: &Tensor<f64>, d: &Tensor<f64>, relu: bool) -> Vec<f64> {
    let (dm, h) = (g.shape()[0], g.shape()[1]);
    let mut y = vec![0.0; dm];
    for j in 0..h {
        let (mut gs, mut us) = (0.0, 0.0);
        for i in 0..dm {
            gs += x[i] * g.get2(i, j);
            us += x[i] * u.get2(i, j);
        }
        let a = if relu { gs.max(0.0) } else { gs / (1.0 + (-gs).exp()) };
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += a * us * d.get2(j, o);
        }
    }
    y
}

// Routing analysis

pub fn forced_signature(language: &str, experts: &[usize], layers: usize, n_experts: usize, tokens: usize) -> SpecializationMatrix {
    let mut log = RoutingLog::new(n_experts, experts.len());
    let probs = vec![1.0 / n_experts as f64; n_experts];
    for layer in 0..layers {
        for pos in 0..tokens {
            let rec = RoutingRecord {
                layer,
                pos,
                experts: experts.to_vec(),
                probs: vec![1.0 / n_experts as f64; experts.len()],
                lse: (n_experts as f64).ln(),
            };
            log.push(rec, &probs);
        }
    }
    SpecializationMatrix::from_routing_log(language, &log).unwrap()
}

/// Correlation of two disjoint indicator vectors, counted element by element.
pub fn indicator_rho_brute_force(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
    cov / (va * vb).sqrt()
}

pub fn corr(labels: &[&str], values: Vec<Vec<f64>>) -> CorrelationMatrix {
    CorrelationMatrix::new(labels.iter().map(|s| s.to_string()).collect(), values).unwrap()
}

pub fn random_corr(rng: &mut ChaCha8Rng, labels: &[String]) -> CorrelationMatrix {
    let sigs: Vec<SpecializationMatrix> = labels
        .iter()
        .map(|l| SpecializationMatrix {
            language: l.clone(),
            layers: 2,
            experts: 6,
            n_tokens: 1,
            matrix: (0..12).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    correlation_matrix(&sigs).unwrap()
}

/// Exhaustive average linkage: every step recomputes all cluster distances
/// from leaf pairs.
pub fn linkage_oracle(c: &CorrelationMatrix) -> Vec<(BTreeSet<String>, BTreeSet<String>, f64)> {
    let n = c.len();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    let label_key = |cl: &Vec<usize>| cl.iter().map(|&i| c.languages[i].clone()).min().unwrap();
    while clusters.len() > 1 {
        let mut cands = Vec::new();
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut s = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        s += 1.0 - c.values[a][b];
                    }
                }
                let d = s / (clusters[i].len() * clusters[j].len()) as f64;
                let (ki, kj) = (label_key(&clusters[i]), label_key(&clusters[j]));
                let key = if ki <= kj { (ki, kj) } else { (kj, ki) };
                cands.push((d, key, i, j));
            }
        }
        let best = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let (d, _, i, j) = cands
            .into_iter()
            .filter(|c| c.0 <= best + 1e-12)
            .min_by(|a, b| a.1.cmp(&b.1))
            .unwrap();
        let set = |cl: &Vec<usize>| cl.iter().map(|&i| c.languages[i].clone()).collect::<BTreeSet<_>>();
        out.push((set(&clusters[i]), set(&clusters[j]), d));
        let right = clusters.remove(j);
        clusters[i].extend(right);
    }
    out
}

pub fn merge_sets(d: &Dendrogram) -> Vec<(BTreeSet<String>, BTreeSet<String>, f64)> {
    d.merges
        .iter()
        .map(|m| {
            (
                d.members(m.left).into_iter().collect(),
                d.members(m.right).into_iter().collect(),
                m.height,
            )
        })
        .collect()
}

pub fn same_merges(a: &[(BTreeSet<String>, BTreeSet<String>, f64)], b: &[(BTreeSet<String>, BTreeSet<String>, f64)]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let pair = |p: &(BTreeSet<String>, BTreeSet<String>, f64)| {
                let (l, r) = (p.0.clone(), p.1.clone());
                if l <= r {
                    (l, r)
                } else {
                    (r, l)
                }
            };
            pair(x) == pair(y) && (x.2 - y.2).abs() < 1e-12
        })
}

pub fn block_corr() -> CorrelationMatrix {
    let labels = ["de", "en", "ja", "zh"];
    let same = |a: usize, b: usize| (a < 2) == (b < 2);
    let values = (0..4)
        .map(|i| {
            (0..4)
                .map(|j| if i == j { 1.0 } else if same(i, j) { 0.9 } else { 0.1 })
                .collect()
        })
        .collect();
    corr(&labels, values)
}
