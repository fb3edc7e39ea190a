use serde::{Deserialize, Serialize};

use super::correlation::CorrelationMatrix;
use super::newick::NewickNode;
use crate::error::{Error, Result};

/// Distances closer than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Node ids `0..n` are leaves; merge `i` creates node `n + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn root(&self) -> usize {
        self.leaves.len() + self.merges.len() - 1
    }

    pub fn height(&self, node: usize) -> f64 {
        if node < self.leaves.len() {
            0.0
        } else {
            self.merges[node - self.leaves.len()].height
        }
    }

    /// Leaf labels under `node`, left to right.
    pub fn members(&self, node: usize) -> Vec<String> {
        if node < self.leaves.len() {
            return vec![self.leaves[node].clone()];
        }
        let m = &self.merges[node - self.leaves.len()];
        let mut out = self.members(m.left);
        out.extend(self.members(m.right));
        out
    }

    /// Newick tree; a child's branch length is half the height gap to its parent.
    pub fn to_newick_tree(&self) -> NewickNode {
        fn build(d: &Dendrogram, node: usize, parent_height: f64) -> NewickNode {
            let length = Some((parent_height - d.height(node)) / 2.0);
            if node < d.leaves.len() {
                return NewickNode::leaf(&d.leaves[node], length);
            }
            let m = &d.merges[node - d.leaves.len()];
            NewickNode {
                label: None,
                length,
                children: vec![build(d, m.left, m.height), build(d, m.right, m.height)],
            }
        }
        let root = self.root();
        build(self, root, self.height(root))
    }

    pub fn to_newick(&self) -> String {
        self.to_newick_tree().to_string()
    }
}

/// Unweighted average-linkage clustering on the distance `1 - ρ`.
///
/// Each step merges the closest pair of clusters; ties go to the pair whose
/// smallest leaf labels sort first. The merged cluster's distance to every
/// other cluster is the size-weighted mean of its parts, which equals the
/// mean over all cross-cluster leaf pairs.
pub fn cluster(corr: &CorrelationMatrix) -> Result<Dendrogram> {
    let n = corr.len();
    if n < 2 {
        return Err(Error::Input("clustering needs at least two languages".into()));
    }
    let mut dist: Vec<Vec<f64>> = corr
        .values
        .iter()
        .map(|row| row.iter().map(|r| 1.0 - r).collect())
        .collect();
    // Active clusters: (node id, size, smallest leaf label).
    let mut active: Vec<(usize, usize, String)> =
        corr.languages.iter().enumerate().map(|(i, l)| (i, 1, l.clone())).collect();
    // Distances are indexed by position in `active`, kept aligned below.
    let mut merges = Vec::with_capacity(n - 1);
    while active.len() > 1 {
        let mut best = f64::INFINITY;
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                best = best.min(dist[i][j]);
            }
        }
        let mut pick: Option<(usize, usize)> = None;
        let key = |a: usize, b: usize| {
            let (x, y) = (&active[a].2, &active[b].2);
            if x <= y {
                (x.clone(), y.clone())
            } else {
                (y.clone(), x.clone())
            }
        };
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                if dist[i][j] <= best + TIE_TOLERANCE && pick.is_none_or(|(a, b)| key(i, j) < key(a, b)) {
                    pick = Some((i, j));
                }
            }
        }
        let (i, j) = pick.expect("at least one pair");
        let (ni, si, li) = active[i].clone();
        let (nj, sj, lj) = active[j].clone();
        let (left, right) = if li <= lj { (ni, nj) } else { (nj, ni) };
        let height = dist[i][j];
        let node = n + merges.len();
        merges.push(Merge {
            left,
            right,
            height,
            size: si + sj,
        });
        let merged: Vec<f64> = (0..active.len())
            .map(|k| (si as f64 * dist[i][k] + sj as f64 * dist[j][k]) / (si + sj) as f64)
            .collect();
        // Replace i with the merged cluster, drop j (j > i).
        for k in 0..active.len() {
            dist[i][k] = merged[k];
            dist[k][i] = merged[k];
        }
        dist[i][i] = 0.0;
        dist.remove(j);
        for row in &mut dist {
            row.remove(j);
        }
        active[i] = (node, si + sj, li.min(lj));
        active.remove(j);
    }
    Ok(Dendrogram {
        leaves: corr.languages.clone(),
        merges,
    })
}
