use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::kernels::{Scalar, Tensor};
use crate::moe::ExpertWeights;

/// `⌈ratio · d_expert⌉`, ignoring float noise just above an integer.
pub fn drop_count(drop_ratio: f64, d_expert: usize) -> usize {
    let raw = drop_ratio * d_expert as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(d_expert)
}

fn resample<T: Scalar, R: Rng>(
    t: &mut Tensor<T>,
    cells: impl Iterator<Item = usize> + Clone,
    rng: &mut R,
) {
    let n = cells.clone().count();
    if n == 0 {
        return;
    }
    let values: Vec<f64> = cells.clone().map(|i| t.data()[i].to_f64_lossy()).collect();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let normal = Normal::new(mean, var.sqrt()).expect("finite statistics");
    for i in cells {
        t.data_mut()[i] = T::from_f64_lossy(normal.sample(rng));
    }
}

/// Drop-Upcycling of one expert, also returning the sorted dropped indices.
///
/// Samples `⌈ratio·d_expert⌉` intermediate indices without replacement and
/// redraws the matching columns of `gate`/`up` and rows of `down` from a
/// normal fitted (mean, population variance) to that matrix's dropped entries.
pub fn drop_reinit_with_indices<T: Scalar, R: Rng>(
    expert: &ExpertWeights<T>,
    drop_ratio: f64,
    rng: &mut R,
) -> (ExpertWeights<T>, Vec<usize>) {
    let h = expert.gate.last_dim();
    let d = expert.gate.rows();
    let mut idx = index::sample(rng, h, drop_count(drop_ratio, h)).into_vec();
    idx.sort_unstable();
    let mut out = expert.clone();
    let columns = idx
        .iter()
        .flat_map(|&c| (0..d).map(move |r| r * h + c))
        .collect::<Vec<_>>();
    let rows = idx
        .iter()
        .flat_map(|&r| (0..d).map(move |c| r * d + c))
        .collect::<Vec<_>>();
    resample(&mut out.gate, columns.iter().copied(), rng);
    resample(&mut out.up, columns.iter().copied(), rng);
    resample(&mut out.down, rows.iter().copied(), rng);
    (out, idx)
}

pub fn drop_reinit<T: Scalar, R: Rng>(expert: &ExpertWeights<T>, drop_ratio: f64, rng: &mut R) -> ExpertWeights<T> {
    drop_reinit_with_indices(expert, drop_ratio, rng).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn expert(d: usize, h: usize) -> ExpertWeights<f64> {
        ExpertWeights {
            gate: Tensor::from_fn(&[d, h], |i| (i as f64 * 0.7).sin()),
            up: Tensor::from_fn(&[d, h], |i| (i as f64 * 0.3).cos()),
            down: Tensor::from_fn(&[h, d], |i| (i as f64 * 1.1).sin()),
        }
    }

    #[test]
    fn zero_ratio_is_identity() {
        let e = expert(6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, idx) = drop_reinit_with_indices(&e, 0.0, &mut rng);
        assert!(idx.is_empty());
        assert_eq!(out, e);
    }

    #[test]
    fn counts_round_up() {
        assert_eq!(drop_count(0.5, 12), 6);
        assert_eq!(drop_count(0.1, 30), 3);
        assert_eq!(drop_count(0.01, 12), 1);
        assert_eq!(drop_count(1.0, 12), 12);
    }

    #[test]
    fn only_selected_slices_change() {
        let e = expert(5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, idx) = drop_reinit_with_indices(&e, 0.5, &mut rng);
        assert_eq!(idx.len(), 5);
        for r in 0..5 {
            for c in 0..10 {
                let same = out.gate.get2(r, c) == e.gate.get2(r, c);
                assert_eq!(same, !idx.contains(&c));
                assert_eq!(out.up.get2(r, c) == e.up.get2(r, c), !idx.contains(&c));
                assert_eq!(out.down.get2(c, r) == e.down.get2(c, r), !idx.contains(&c));
            }
        }
    }
}
