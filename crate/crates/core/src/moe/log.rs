use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token's routing at one layer. Serialized as a JSON-lines row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub pos: usize,
    pub experts: Vec<usize>,
    pub probs: Vec<f64>,
    pub lse: f64,
}

/// Per-layer aggregates: selection counts `f` and summed router probabilities `P`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStats {
    pub counts: Vec<u64>,
    pub prob_sum: Vec<f64>,
    pub tokens: u64,
}

impl LayerStats {
    fn new(n_experts: usize) -> Self {
        Self {
            counts: vec![0; n_experts],
            prob_sum: vec![0.0; n_experts],
            tokens: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLog {
    pub n_experts: usize,
    pub top_k: usize,
    pub records: Vec<RoutingRecord>,
    /// Indexed by layer; layers without MoE routing stay empty.
    pub layers: Vec<LayerStats>,
}

impl RoutingLog {
    pub fn new(n_experts: usize, top_k: usize) -> Self {
        Self {
            n_experts,
            top_k,
            records: Vec::new(),
            layers: Vec::new(),
        }
    }

    /// Appends one token's routing. `full_probs` is the whole softmax row.
    pub fn push(&mut self, record: RoutingRecord, full_probs: &[f64]) {
        let layer = record.layer;
        if self.layers.len() <= layer {
            self.layers.resize_with(layer + 1, || LayerStats::new(self.n_experts));
        }
        let stats = &mut self.layers[layer];
        if stats.counts.is_empty() {
            *stats = LayerStats::new(self.n_experts);
        }
        for &e in &record.experts {
            stats.counts[e] += 1;
        }
        for (s, &p) in stats.prob_sum.iter_mut().zip(full_probs) {
            *s += p;
        }
        stats.tokens += 1;
        self.records.push(record);
    }

    /// Appends another log's records and folds its aggregates in.
    pub fn merge(&mut self, other: RoutingLog) {
        if self.layers.len() < other.layers.len() {
            self.layers.resize_with(other.layers.len(), || LayerStats::new(self.n_experts));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(other.layers) {
            if theirs.tokens == 0 {
                continue;
            }
            if mine.counts.is_empty() {
                *mine = LayerStats::new(self.n_experts);
            }
            for (a, b) in mine.counts.iter_mut().zip(&theirs.counts) {
                *a += b;
            }
            for (a, b) in mine.prob_sum.iter_mut().zip(&theirs.prob_sum) {
                *a += b;
            }
            mine.tokens += theirs.tokens;
        }
        self.records.extend(other.records);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Layers that saw at least one token.
    pub fn routed_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, s)| s.tokens > 0)
            .map(|(l, _)| l)
    }

    /// Selection counts per layer recomputed from the raw records.
    pub fn recount(&self) -> Vec<Vec<u64>> {
        let n_layers = self.records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let mut counts = vec![vec![0u64; self.n_experts]; n_layers];
        for r in &self.records {
            for &e in &r.experts {
                counts[r.layer][e] += 1;
            }
        }
        counts
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn records_from_jsonl(text: &str) -> Result<Vec<RoutingRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// `E · Σᵢ fᵢ·Pᵢ` for one layer.
///
/// `fᵢ` is expert `i`'s share of the layer's `tokens · k` selection slots and
/// `Pᵢ` its mean router probability. Uniform routing gives exactly 1.
pub fn load_balance_loss(log: &RoutingLog, layer: usize) -> Result<f64> {
    let stats = log
        .layers
        .get(layer)
        .filter(|s| s.tokens > 0)
        .ok_or_else(|| Error::Misuse(format!("no routed tokens recorded for layer {layer}")))?;
    let slots = (stats.tokens * log.top_k as u64) as f64;
    let tokens = stats.tokens as f64;
    let dot: f64 = stats
        .counts
        .iter()
        .zip(&stats.prob_sum)
        .map(|(&c, &p)| (c as f64 / slots) * (p / tokens))
        .sum();
    Ok(log.n_experts as f64 * dot)
}

/// Mean over token-layer records of `logsumexp(router logits)²`.
pub fn router_z_loss(log: &RoutingLog) -> Result<f64> {
    if log.records.is_empty() {
        return Err(Error::Misuse("router z-loss of an empty routing log".into()));
    }
    let sum: f64 = log.records.iter().map(|r| r.lse * r.lse).sum();
    Ok(sum / log.records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_log(e: usize, k: usize, tokens: usize) -> RoutingLog {
        let mut log = RoutingLog::new(e, k);
        let probs = vec![1.0 / e as f64; e];
        for t in 0..tokens {
            // rotate selections so every expert gets the same number of slots
            let experts: Vec<usize> = (0..k).map(|j| (t * k + j) % e).collect();
            log.push(
                RoutingRecord {
                    layer: 0,
                    pos: t,
                    experts,
                    probs: vec![1.0 / e as f64; k],
                    lse: (e as f64).ln(),
                },
                &probs,
            );
        }
        log
    }

    #[test]
    fn uniform_routing_balance_is_one() {
        let log = uniform_log(8, 2, 16);
        assert!((load_balance_loss(&log, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collapsed_routing_balance_is_e() {
        let e = 6;
        let mut log = RoutingLog::new(e, 1);
        let mut probs = vec![0.0; e];
        probs[0] = 1.0;
        for t in 0..5 {
            log.push(
                RoutingRecord {
                    layer: 0,
                    pos: t,
                    experts: vec![0],
                    probs: vec![1.0],
                    lse: 0.0,
                },
                &probs,
            );
        }
        assert!((load_balance_loss(&log, 0).unwrap() - e as f64).abs() < 1e-12);
    }

    #[test]
    fn z_loss_zero_logits() {
        let log = uniform_log(8, 2, 4);
        let expect = 8f64.ln().powi(2);
        assert!((router_z_loss(&log).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 4.3241).abs() < 1e-4);
    }

    #[test]
    fn empty_log_is_misuse() {
        let log = RoutingLog::new(4, 1);
        assert!(matches!(router_z_loss(&log), Err(Error::Misuse(_))));
        assert!(matches!(load_balance_loss(&log, 0), Err(Error::Misuse(_))));
    }

    #[test]
    fn jsonl_rows_have_the_documented_keys() {
        let log = uniform_log(4, 1, 2);
        let text = log.to_jsonl().unwrap();
        let first = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        for k in ["layer", "pos", "experts", "probs", "lse"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(RoutingLog::records_from_jsonl(&text).unwrap(), log.records);
    }

    #[test]
    fn merge_matches_recount() {
        let mut a = uniform_log(4, 2, 3);
        let b = uniform_log(4, 2, 5);
        a.merge(b);
        assert_eq!(a.layers[0].tokens, 8);
        assert_eq!(a.recount()[0], a.layers[0].counts);
    }
}
