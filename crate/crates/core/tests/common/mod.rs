//! Independent oracles shared by the integration tests. Nothing here calls
//! into the crate's kernels, tape or clustering code.
#![allow(dead_code)]

use promptfocus::dcp::DcpConfig;
use promptfocus::tensor::nn::{Attention, Linear, Mlp};
use promptfocus::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for (p, brow) in b.iter().enumerate().take(k) {
            for j in 0..m {
                out[i][j] += a[i][p] * brow[j];
            }
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(r).map(|(p, q)| p + q).collect()).collect()
}

pub fn mean_rows(a: &Mat) -> Vec<f64> {
    let n = a.len() as f64;
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    add_row(&matmul(x, &mat(&l.weight)), l.bias.data())
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn mlp(x: &Mat, m: &Mlp) -> Mat {
    let h: Mat = linear(x, &m.fc1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &m.fc2)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Multi-head attention; returns the output and the per-head weights.
pub fn attention(q_in: &Mat, kv_in: &Mat, a: &Attention) -> (Mat, Vec<Mat>) {
    let (q, k, v) = (linear(q_in, &a.q), linear(kv_in, &a.k), linear(kv_in, &a.v));
    let width = q[0].len();
    let hd = width / a.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut merged = vec![vec![0.0; width]; q.len()];
    let mut weights = Vec::new();
    for h in 0..a.heads {
        let cols = h * hd..(h + 1) * hd;
        let mut w = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() * scale)
                .collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                merged[i][c] = p.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum();
            }
            w.push(p);
        }
        weights.push(w);
    }
    (linear(&merged, &a.out), weights)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `exp(cos/T)` normalised over classes.
pub fn cosine_softmax(img: &[f64], rows: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().zip(img).map(|(a, b)| a * b).sum::<f64>() / (norm(r) * norm(img)))
        .collect();
    softmax(&cos.iter().map(|c| c / temperature).collect::<Vec<_>>())
}

/// Average-linkage agglomeration by brute force: repeatedly merge the pair
/// of clusters with the smallest mean pairwise distance while it is at most
/// `tau`. Returns clusters as sorted member lists.
pub fn naive_average_linkage(points: &[Vec<f64>], tau: f64) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += dist(&points[i], &points[j]);
                    }
                }
                let d = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        match best {
            Some((d, a, b)) if d <= tau => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }
    clusters.sort();
    clusters
}

/// Member closest in cosine to the cluster centroid; lowest index on ties.
pub fn central_member(points: &[Vec<f64>], members: &[usize]) -> usize {
    let d = points[0].len();
    let centroid: Vec<f64> = (0..d).map(|j| members.iter().map(|&m| points[m][j]).sum()).collect();
    let cn = centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = members[0];
    let mut best_cos = f64::NEG_INFINITY;
    for &m in members {
        let cos = points[m].iter().zip(&centroid).map(|(a, b)| a * b).sum::<f64>() / cn;
        if cos > best_cos + 1e-12 {
            best = m;
            best_cos = cos;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub cls: Vec<String>,
    pub sim: Vec<f64>,
    pub iterations: usize,
    pub tau_f: f64,
    pub tau_c: f64,
}

/// The selection loop written out step by step from its description.
///
/// L starts at the library size. A pass is always taken first; afterwards
/// passes continue while L > N and both thresholds are within range. Each
/// pass filters the whole library with `s > tau_f`, clusters survivors at
/// `tau_c · scale`, keeps central members ordered by descending score, and
/// sets L. Passes whose filter keeps nothing change nothing. `None` means
/// every pass was empty.
pub fn replay_selection(scores: &[f64], names: &[String], rows: &[Vec<f64>], cfg: &DcpConfig) -> Option<Replay> {
    let within = |v: f64, max: f64| v <= max + 1e-9 * max.abs().max(1.0);
    let mut l = names.len();
    let mut k = 0usize;
    let mut last: Option<Replay> = None;
    loop {
        let tau_f = cfg.tau_f_min + k as f64 * cfg.delta_tau_f;
        let tau_c = cfg.tau_c_min + k as f64 * cfg.delta_tau_c;
        if k > 0 && !(l > cfg.max_classes && within(tau_f, cfg.tau_f_max) && within(tau_c, cfg.tau_c_max)) {
            break;
        }
        k += 1;
        let kept: Vec<usize> = (0..names.len()).filter(|&i| scores[i] > tau_f).collect();
        if kept.is_empty() {
            continue;
        }
        let pts: Vec<Vec<f64>> = kept.iter().map(|&i| rows[i].clone()).collect();
        let mut reps: Vec<usize> = naive_average_linkage(&pts, tau_c * cfg.tau_c_scale)
            .iter()
            .map(|members| kept[central_member(&pts, members)])
            .collect();
        reps.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        l = reps.len();
        last = Some(Replay {
            cls: reps.iter().map(|&i| names[i].clone()).collect(),
            sim: reps.iter().map(|&i| scores[i]).collect(),
            iterations: 0,
            tau_f,
            tau_c,
        });
    }
    last.map(|r| Replay { iterations: k, ..r })
}
