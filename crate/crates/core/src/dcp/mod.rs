//! Dynamic class-aware prompter.
//!
//! Per image: score every library class, then alternate category filtering
//! (keep classes with probability strictly above `tau_f`) and average-linkage
//! clustering (merge classes closer than `tau_c`, keep the most central member
//! of each cluster) while raising both thresholds, until at most
//! `max_classes` prompts remain or either threshold leaves its range.

mod cluster;

pub use cluster::{average_linkage, euclidean, ClusterTree, Merge};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{
    dot, image_class_similarity, l2, CategoryLibrary, EmbeddingError, EmbeddingTable,
    ScoreSummary, SimilarityScores,
};

/// Relative slack when comparing an accumulated threshold against its maximum.
const SCHEDULE_EPS: f64 = 1e-9;
/// Centroid similarities closer than this count as tied.
pub const CENTRALITY_TIE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DcpError {
    #[error("invalid DCP configuration: {0}")]
    Config(String),
    #[error("no class passed the filter on any pass ({0})")]
    EmptySelection(ScoreSummary),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub type Result<T> = std::result::Result<T, DcpError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcpConfig {
    pub tau_f_min: f64,
    pub tau_f_max: f64,
    pub delta_tau_f: f64,
    pub tau_c_min: f64,
    pub tau_c_max: f64,
    pub delta_tau_c: f64,
    pub max_classes: usize,
    /// Multiplier applied to the `tau_c` schedule before comparing against
    /// Euclidean distances between unit-norm embeddings.
    pub tau_c_scale: f64,
    /// Softmax temperature for image↔class cosine similarities.
    pub temperature: f64,
}

impl Default for DcpConfig {
    fn default() -> Self {
        Self {
            tau_f_min: 0.002,
            tau_f_max: 0.005,
            delta_tau_f: 0.001,
            tau_c_min: 3.0,
            tau_c_max: 7.0,
            delta_tau_c: 0.5,
            max_classes: 30,
            tau_c_scale: 0.05,
            temperature: 0.01,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DcpError::Config(m.to_string()));
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.tau_f_min) || !unit(self.tau_f_max) {
            return bad("filter thresholds must lie in (0, 1)");
        }
        if self.tau_f_min > self.tau_f_max {
            return bad("tau_f_min exceeds tau_f_max");
        }
        if !self.tau_c_min.is_finite() || !self.tau_c_max.is_finite() || self.tau_c_min > self.tau_c_max {
            return bad("tau_c_min exceeds tau_c_max");
        }
        if !(self.delta_tau_f > 0.0 && self.delta_tau_c > 0.0) {
            return bad("threshold increments must be positive");
        }
        if self.max_classes == 0 {
            return bad("max_classes must be at least 1");
        }
        if !(self.tau_c_scale > 0.0 && self.tau_c_scale.is_finite()) {
            return bad("tau_c_scale must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    /// Thresholds `(tau_f, tau_c)` on pass `k` (0-based).
    pub fn thresholds(&self, k: usize) -> (f64, f64) {
        (
            self.tau_f_min + k as f64 * self.delta_tau_f,
            self.tau_c_min + k as f64 * self.delta_tau_c,
        )
    }

    /// Whether both thresholds of pass `k` are still within range.
    pub fn in_range(&self, k: usize) -> bool {
        let (f, c) = self.thresholds(k);
        let slack = |m: f64| SCHEDULE_EPS * m.abs().max(1.0);
        f <= self.tau_f_max + slack(self.tau_f_max) && c <= self.tau_c_max + slack(self.tau_c_max)
    }

    /// Upper bound on passes: `ceil((tau_f_max - tau_f_min) / delta_tau_f) + 1`.
    pub fn max_iterations(&self) -> usize {
        let span = (self.tau_f_max - self.tau_f_min) / self.delta_tau_f;
        (span - SCHEDULE_EPS).max(0.0).ceil() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    /// At most `max_classes` prompts remained.
    WithinLimit,
    /// A threshold left its range first; the selection may exceed `max_classes`.
    ThresholdsExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMeta {
    pub exit_reason: ExitReason,
    pub config: DcpConfig,
}

/// Class prompts with their similarity probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSelection {
    pub cls: Vec<String>,
    pub sim: Vec<f64>,
    pub iterations_used: usize,
    pub final_tau_f: f64,
    pub final_tau_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SelectionMeta>,
}

impl PromptSelection {
    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    /// Same selection with its (class, probability) pairs reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            cls: order.iter().map(|&i| self.cls[i].clone()).collect(),
            sim: order.iter().map(|&i| self.sim[i]).collect(),
            ..self.clone()
        }
    }
}

/// Keeps exactly the classes with `s_l > tau_f`, in library order.
pub fn category_filter(
    scores: &SimilarityScores,
    lib: &CategoryLibrary,
    tau_f: f64,
) -> Result<PromptSelection> {
    if scores.len() != lib.len() {
        return Err(DcpError::Config(format!(
            "{} scores for {} library classes",
            scores.len(),
            lib.len()
        )));
    }
    let (cls, sim) = lib
        .names()
        .iter()
        .zip(&scores.values)
        .filter(|(_, &s)| s > tau_f)
        .map(|(n, &s)| (n.clone(), s))
        .unzip();
    Ok(PromptSelection {
        cls,
        sim,
        iterations_used: 0,
        final_tau_f: tau_f,
        final_tau_c: 0.0,
        meta: None,
    })
}

/// Clusters the selected classes and keeps one representative per cluster.
///
/// `distance_threshold` is compared directly against average-linkage merge
/// distances. Representatives are the members most cosine-similar to their
/// cluster centroid (lowest table index on ties); output is ordered by
/// descending probability.
pub fn hierarchical_cluster(
    selection: &PromptSelection,
    table: &EmbeddingTable,
    distance_threshold: f64,
) -> Result<(PromptSelection, ClusterTree)> {
    if selection.is_empty() {
        return Err(DcpError::Config("cannot cluster an empty selection".into()));
    }
    let idx: Vec<usize> = selection
        .cls
        .iter()
        .map(|n| {
            table.index_of(n).ok_or_else(|| {
                DcpError::Embedding(EmbeddingError::Data(format!(
                    "class {n:?} not in embedding table"
                )))
            })
        })
        .collect::<Result<_>>()?;
    let points: Vec<&[f64]> = idx.iter().map(|&i| table.row(i)).collect();
    let tree = average_linkage(&points, selection.cls.clone());
    let labels = tree.cut(distance_threshold);
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);

    let dim = table.dim();
    let mut picked: Vec<usize> = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.sort_by_key(|&i| idx[i]);
        let mut centroid = vec![0.0; dim];
        for &m in &members {
            centroid.iter_mut().zip(points[m]).for_each(|(o, v)| *o += v);
        }
        let cn = l2(&centroid);
        let mut best = members[0];
        let mut best_cos = f64::NEG_INFINITY;
        for &m in &members {
            // rows are unit norm
            let cos = if cn > 0.0 { dot(points[m], &centroid) / cn } else { 0.0 };
            if cos > best_cos + CENTRALITY_TIE_EPS {
                best = m;
                best_cos = cos;
            }
        }
        picked.push(best);
    }
    picked.sort_by(|&a, &b| {
        selection.sim[b]
            .total_cmp(&selection.sim[a])
            .then(idx[a].cmp(&idx[b]))
    });
    let out = PromptSelection {
        cls: picked.iter().map(|&i| selection.cls[i].clone()).collect(),
        sim: picked.iter().map(|&i| selection.sim[i]).collect(),
        iterations_used: selection.iterations_used,
        final_tau_f: selection.final_tau_f,
        final_tau_c: distance_threshold,
        meta: None,
    };
    Ok((out, tree))
}

/// Runs the full selection loop on precomputed scores.
///
/// One filter+cluster pass always runs; further passes run while more than
/// `max_classes` prompts remain and both thresholds are in range. Each pass
/// re-filters the whole library. A pass whose filter keeps nothing skips
/// clustering. The last non-empty pass is returned.
pub fn select_from_scores(
    scores: &SimilarityScores,
    lib: &CategoryLibrary,
    table: &EmbeddingTable,
    cfg: &DcpConfig,
) -> Result<PromptSelection> {
    cfg.validate()?;
    table.covers(lib)?;
    let mut remaining = lib.len();
    let mut last: Option<PromptSelection> = None;
    let mut k = 0;
    loop {
        if k > 0 && !(remaining > cfg.max_classes && cfg.in_range(k)) {
            break;
        }
        let (tau_f, tau_c) = cfg.thresholds(k);
        let filtered = category_filter(scores, lib, tau_f)?;
        k += 1;
        if filtered.is_empty() {
            continue;
        }
        let (mut clustered, _) = hierarchical_cluster(&filtered, table, tau_c * cfg.tau_c_scale)?;
        clustered.iterations_used = k;
        clustered.final_tau_f = tau_f;
        clustered.final_tau_c = tau_c;
        remaining = clustered.len();
        last = Some(clustered);
    }
    let mut out = last.ok_or_else(|| DcpError::EmptySelection(scores.summary()))?;
    out.iterations_used = k;
    out.meta = Some(SelectionMeta {
        exit_reason: if out.len() <= cfg.max_classes {
            ExitReason::WithinLimit
        } else {
            ExitReason::ThresholdsExhausted
        },
        config: *cfg,
    });
    Ok(out)
}

/// Scores `img_embedding` against the library and runs [`select_from_scores`].
pub fn select_prompts(
    img_embedding: &[f64],
    lib: &CategoryLibrary,
    table: &EmbeddingTable,
    cfg: &DcpConfig,
) -> Result<PromptSelection> {
    cfg.validate()?;
    let aligned;
    let scoring_table = if table.names() == lib.names() {
        table
    } else {
        aligned = table.aligned_to(lib)?;
        &aligned
    };
    let scores = image_class_similarity(img_embedding, scoring_table, cfg.temperature)?;
    select_from_scores(&scores, lib, table, cfg)
}
