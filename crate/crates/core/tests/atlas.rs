mod common;

use std::collections::BTreeSet;

use common::*;
use finemoe::atlas::{
    cluster, collect_signature, correlation_matrix, pearson, CorrelationMatrix, NewickNode,
    SpecializationMatrix,
};
use finemoe::model::{forward_logits, init_dense, init_moe, names, ModelConfig};
use finemoe::moe::{MoEConfig, RoutingLog};
use finemoe::{Checkpoint, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const E: usize = 8;
const K: usize = 2;

fn moe_config() -> ModelConfig {
    ModelConfig::tiny_dense(16, 32, 2).with_moe(MoEConfig {
        d_expert: 8,
        n_experts: E,
        top_k: K,
        output_multiplier: 1.0,
        norm_topk_prob: false,
    })
}

fn docs(seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.random_range(0..256)).collect())
        .collect()
}

/// Model whose routers always choose `experts`: every embedding carries a
/// large constant in dimension 0 and the routers read only that dimension.
fn forced_model(experts: &[usize]) -> Checkpoint<f64> {
    let cfg = moe_config();
    let mut ckpt: Checkpoint<f64> = init_moe(&cfg, 1).unwrap();
    let emb = ckpt.get_mut(names::EMBED).unwrap();
    for r in 0..emb.rows() {
        emb.row_mut(r)[0] = 10.0;
    }
    for l in 0..cfg.n_layers {
        let router = ckpt.get_mut(&names::router(l)).unwrap();
        router.data_mut().fill(0.0);
        for &e in experts {
            router.row_mut(0)[e] = 5.0;
        }
    }
    ckpt
}

#[test]
fn forced_routing_gives_indicator_rows() {
    let ckpt = forced_model(&[0, 1]);
    let sig = collect_signature(&ckpt, "xx", &docs(0, 4, 12)).unwrap();
    assert_eq!((sig.layers, sig.experts, sig.n_tokens), (2, E, 48));
    for l in 0..sig.layers {
        assert_eq!(sig.row(l), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn zero_router_follows_the_tie_break() {
    let mut ckpt: Checkpoint<f64> = init_moe(&moe_config(), 2).unwrap();
    for l in 0..2 {
        ckpt.get_mut(&names::router(l)).unwrap().data_mut().fill(0.0);
    }
    let sig = collect_signature(&ckpt, "xx", &docs(1, 3, 10)).unwrap();
    for l in 0..sig.layers {
        assert_eq!(&sig.row(l)[..K], &[1.0; K]);
        assert!(sig.row(l)[K..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn layer_sums_equal_k_on_a_random_model() {
    let ckpt = common::random_model(&moe_config(), 3, 0.5);
    let sig = collect_signature(&ckpt, "xx", &docs(2, 7, 13)).unwrap();
    for l in 0..sig.layers {
        assert_eq!(sig.layer_sum(l), K as f64);
        let float_sum: f64 = sig.row(l).iter().sum();
        assert!((float_sum - K as f64).abs() < 1e-9);
        assert!(sig.row(l).iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(sig.row(l).iter().filter(|&&v| v > 0.0).count() > K, "perturbed router spreads tokens");
    }
}

#[test]
fn signature_matches_recount_of_jsonl_log() {
    let ckpt = common::random_model(&moe_config(), 4, 0.5);
    let ds = docs(3, 5, 9);
    let sig = collect_signature(&ckpt, "xx", &ds).unwrap();
    let mut counts = vec![vec![0u64; E]; 2];
    for d in &ds {
        let log = forward_logits(d, &ckpt).unwrap().routing.unwrap();
        for rec in RoutingLog::records_from_jsonl(&log.to_jsonl().unwrap()).unwrap() {
            for e in rec.experts {
                counts[rec.layer][e] += 1;
            }
        }
    }
    assert_eq!(sig.counts(), counts);
    let n = 45.0;
    for (l, row) in counts.iter().enumerate() {
        for (e, &c) in row.iter().enumerate() {
            assert_eq!(sig.row(l)[e], c as f64 / n);
        }
    }
}

#[test]
fn signature_errors() {
    let dense: Checkpoint<f64> = init_dense(&ModelConfig::tiny_dense(16, 32, 1), 0).unwrap();
    assert!(matches!(collect_signature(&dense, "xx", &docs(0, 1, 4)), Err(Error::Misuse(_))));
    let moe: Checkpoint<f64> = init_moe(&moe_config(), 0).unwrap();
    assert!(matches!(collect_signature(&moe, "xx", &[]), Err(Error::Input(_))));
    assert!(matches!(collect_signature(&moe, "xx", &[vec![]]), Err(Error::Input(_))));
}

#[test]
fn signature_json_shape() {
    let sig = SpecializationMatrix::from_counts("de", &[vec![1, 3], vec![2, 2]], 2).unwrap();
    let v: serde_json::Value = serde_json::to_value(&sig).unwrap();
    assert_eq!(v["language"], "de");
    assert_eq!(v["layers"], 2);
    assert_eq!(v["experts"], 2);
    assert_eq!(v["n_tokens"], 2);
    assert_eq!(v["matrix"], serde_json::json!([0.5, 1.5, 1.0, 1.0]));
    let back: SpecializationMatrix = serde_json::from_value(v).unwrap();
    assert_eq!(back, sig);
}

// Pearson

/// Raw-moment form of the coefficient, independent of the centered sums.
fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
    let saa: f64 = a.iter().map(|x| x * x).sum();
    let sbb: f64 = b.iter().map(|x| x * x).sum();
    let sab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

#[test]
fn pearson_basics() {
    let a = [0.3, 1.2, -0.7, 2.0, 0.0];
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(pearson(&a, &[1.0; 5]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(pearson(&[1.0], &[2.0]), Err(Error::Input(_))));
    assert!(matches!(pearson(&a, &a[..4]), Err(Error::Input(_))));
}

#[test]
fn pearson_matches_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (got, want) = (pearson(&a, &b).unwrap(), pearson_oracle(&a, &b));
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}



#[test]
fn disjoint_forced_sets_give_closed_form_rho() {
    for (e, k) in [(8usize, 2usize), (8, 4), (16, 3), (232, 8)] {
        let a = forced_signature("a", &(0..k).collect::<Vec<_>>(), 3, e, 5);
        let b = forced_signature("b", &(k..2 * k).collect::<Vec<_>>(), 3, e, 5);
        let rho = correlation_matrix(&[a.clone(), b.clone()]).unwrap().values[0][1];
        let closed = -(k as f64) / (e - k) as f64;
        assert!((rho - closed).abs() < 1e-12, "E={e} k={k}: {rho} vs {closed}");
        assert!((indicator_rho_brute_force(&a.matrix, &b.matrix) - closed).abs() < 1e-12);
        for l in 0..3 {
            assert_eq!(a.layer_sum(l), k as f64);
        }
    }
}

#[test]
fn correlation_matrix_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut random_sig = |name: &str| {
        let counts: Vec<Vec<u64>> = (0..2).map(|_| (0..4).map(|_| rng.random_range(0..10)).collect()).collect();
        SpecializationMatrix::from_counts(name, &counts, 10).unwrap()
    };
    let (a, b, c) = (random_sig("a"), random_sig("b"), random_sig("c"));
    let dup = correlation_matrix(&[a.clone(), a.clone()]).unwrap();
    assert!((dup.values[0][1] - 1.0).abs() < 1e-15);
    let m = correlation_matrix(&[a.clone(), b, c]).unwrap();
    for i in 0..3 {
        assert_eq!(m.values[i][i], 1.0);
        for j in 0..3 {
            assert!((m.values[i][j] - m.values[j][i]).abs() <= 1e-12);
        }
    }
    let back = CorrelationMatrix::from_csv(&m.to_csv()).unwrap();
    assert_eq!(back, m);
    let odd = SpecializationMatrix::from_counts("d", &[vec![1, 2, 3]], 3).unwrap();
    assert!(matches!(correlation_matrix(&[a.clone(), odd]), Err(Error::Input(_))));
    assert!(matches!(correlation_matrix(&[a]), Err(Error::Input(_))));
}

proptest! {
    #[test]
    fn correlation_is_affine_invariant(
        raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 3),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let sigs: Vec<SpecializationMatrix> = raw.iter().enumerate().map(|(i, m)| SpecializationMatrix {
            language: format!("l{i}"), layers: 3, experts: 4, n_tokens: 1, matrix: m.clone(),
        }).collect();
        let moved: Vec<SpecializationMatrix> = sigs.iter().map(|s| SpecializationMatrix {
            matrix: s.matrix.iter().map(|v| scale * v + shift).collect(), ..s.clone()
        }).collect();
        let (a, b) = (correlation_matrix(&sigs).unwrap(), correlation_matrix(&moved).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((a.values[i][j] - b.values[i][j]).abs() < 1e-9);
            }
        }
    }
}

// Clustering






#[test]
fn two_languages_merge_once() {
    let c = corr(&["x", "y"], vec![vec![1.0, 0.3], vec![0.3, 1.0]]);
    let d = cluster(&c).unwrap();
    assert_eq!(d.merges.len(), 1);
    assert!((d.merges[0].height - 0.7).abs() < 1e-15);
    assert!(cluster(&corr(&["x"], vec![vec![1.0]])).is_err());
}


#[test]
fn blocks_merge_first() {
    let d = cluster(&block_corr()).unwrap();
    let sets = merge_sets(&d);
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    assert_eq!((sets[0].0.clone(), sets[0].1.clone()), (s(&["de"]), s(&["en"])));
    assert_eq!((sets[1].0.clone(), sets[1].1.clone()), (s(&["ja"]), s(&["zh"])));
    assert!((d.merges[0].height - 0.1).abs() < 1e-12);
    assert!((d.merges[1].height - 0.1).abs() < 1e-12);
    assert!((d.merges[2].height - 0.9).abs() < 1e-12);
    assert!(same_merges(&sets, &linkage_oracle(&block_corr())));
    let tree = NewickNode::parse(&d.to_newick()).unwrap();
    assert_eq!(tree.children.len(), 2);
    assert_eq!(tree.children[0].leaves(), vec!["de", "en"]);
    assert_eq!(tree.children[1].leaves(), vec!["ja", "zh"]);
}

#[test]
fn clustering_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels: Vec<String> = ["ar", "bn", "cs", "de", "el", "fr"].iter().map(|s| s.to_string()).collect();
    for trial in 0..100 {
        let c = random_corr(&mut rng, &labels);
        let d = cluster(&c).unwrap();
        assert!(same_merges(&merge_sets(&d), &linkage_oracle(&c)), "trial {trial}");
        assert!(d.merges.windows(2).all(|w| w[1].height >= w[0].height - 1e-12));
        let mut leaves = d.members(d.root());
        leaves.sort();
        assert_eq!(leaves, labels);
    }
}

#[test]
fn clustering_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<String> = (0..6).map(|i| format!("l{i}")).collect();
    for _ in 0..20 {
        let c = random_corr(&mut rng, &labels);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = CorrelationMatrix::new(
            perm.iter().map(|&p| c.languages[p].clone()).collect(),
            perm.iter().map(|&i| perm.iter().map(|&j| c.values[i][j]).collect()).collect(),
        )
        .unwrap();
        assert!(same_merges(&merge_sets(&cluster(&c).unwrap()), &merge_sets(&cluster(&permuted).unwrap())));
    }
}

// Newick

#[test]
fn two_leaf_newick() {
    let c = corr(&["A", "B"], vec![vec![1.0, 0.6], vec![0.6, 1.0]]);
    assert_eq!(cluster(&c).unwrap().to_newick(), "(A:0.2,B:0.2):0;");
}

#[test]
fn newick_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels: Vec<String> = ["ar", "b c", "it's", "de", "el", "fr", "ko"].iter().map(|s| s.to_string()).collect();
    for _ in 0..50 {
        let d = cluster(&random_corr(&mut rng, &labels)).unwrap();
        let text = d.to_newick();
        let tree = NewickNode::parse(&text).unwrap();
        assert_eq!(tree.to_string(), text);
        assert_eq!(tree, d.to_newick_tree());
        assert_eq!(tree.length, Some(0.0));
    }
}
