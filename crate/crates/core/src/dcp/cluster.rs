//! Average-linkage agglomerative clustering (nearest-neighbour chain).

use serde::{Deserialize, Serialize};

/// One agglomeration step. Ids below the leaf count are leaves; merge `k`
/// creates id `leaves + k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub id: usize,
}

/// Full dendrogram over a set of named leaves, merges sorted by distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub leaves: Vec<String>,
    pub merges: Vec<Merge>,
}

impl ClusterTree {
    /// Flat cluster assignment keeping every merge with `distance <= threshold`.
    /// Returns one label per leaf, labels numbered by first appearance.
    pub fn cut(&self, threshold: f64) -> Vec<usize> {
        let n = self.leaves.len();
        let mut parent: Vec<usize> = (0..2 * n.max(1)).collect();
        for m in self.merges.iter().take_while(|m| m.distance <= threshold) {
            parent[m.left] = m.id;
            parent[m.right] = m.id;
        }
        let root = |mut i: usize| {
            while parent[i] != i {
                i = parent[i];
            }
            i
        };
        let mut labels = Vec::with_capacity(n);
        let mut seen: Vec<usize> = Vec::new();
        for leaf in 0..n {
            let r = root(leaf);
            let label = match seen.iter().position(|&s| s == r) {
                Some(p) => p,
                None => {
                    seen.push(r);
                    seen.len() - 1
                }
            };
            labels.push(label);
        }
        labels
    }

    pub fn cluster_count(&self, threshold: f64) -> usize {
        self.leaves.len() - self.merges.iter().take_while(|m| m.distance <= threshold).count()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Builds the average-linkage dendrogram of `points` (each `dim` wide).
pub fn average_linkage(points: &[&[f64]], names: Vec<String>) -> ClusterTree {
    let n = points.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(points[i], points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut raw: Vec<(usize, usize, f64)> = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();

    for _ in 1..n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("at least two active"));
        }
        let (a, b) = loop {
            let a = *chain.last().expect("chain is non-empty");
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best = None::<(usize, f64)>;
            for x in (0..n).filter(|&x| active[x] && x != a) {
                let d = dist[a * n + x];
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((x, d));
                }
            }
            let (mut b, bd) = best.expect("another active cluster exists");
            if let Some(p) = prev {
                if dist[a * n + p] <= bd {
                    b = p;
                }
            }
            if Some(b) == prev {
                break (a, b);
            }
            chain.push(b);
        };
        chain.truncate(chain.len() - 2);

        let d_ab = dist[a * n + b];
        let (keep, drop) = if a < b { (a, b) } else { (b, a) };
        raw.push((keep, drop, d_ab));
        let (sk, sd) = (size[keep] as f64, size[drop] as f64);
        for x in (0..n).filter(|&x| active[x] && x != keep && x != drop) {
            let d = (sk * dist[keep * n + x] + sd * dist[drop * n + x]) / (sk + sd);
            dist[keep * n + x] = d;
            dist[x * n + keep] = d;
        }
        active[drop] = false;
        size[keep] += size[drop];
    }

    // NN-chain emits merges out of order; sort and relabel to dendrogram ids.
    raw.sort_by(|x, y| x.2.total_cmp(&y.2));
    let mut uf: Vec<usize> = (0..n).collect();
    let mut cluster_id: Vec<usize> = (0..n).collect();
    let find = |uf: &mut Vec<usize>, mut i: usize| {
        while uf[i] != i {
            uf[i] = uf[uf[i]];
            i = uf[i];
        }
        i
    };
    let mut merges = Vec::with_capacity(raw.len());
    for (k, (p, q, d)) in raw.into_iter().enumerate() {
        let rp = find(&mut uf, p);
        let rq = find(&mut uf, q);
        let (left, right) = {
            let (l, r) = (cluster_id[rp], cluster_id[rq]);
            if l < r { (l, r) } else { (r, l) }
        };
        let id = n + k;
        uf[rq] = rp;
        cluster_id[rp] = id;
        merges.push(Merge {
            left,
            right,
            distance: d,
            id,
        });
    }
    ClusterTree {
        leaves: names,
        merges,
    }
}
