//! Category library, class embedding table and image↔class similarity.

mod fixture;

pub(crate) use fixture::ByteReader;

pub use fixture::{
    load_fixture, manifest_path, read_image_embedding, write_fixture, write_image_embedding,
    Manifest, EMBT_MAGIC, EVEC_MAGIC, FORMAT_VERSION,
};

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows further than this from unit norm are rejected on load.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-3;
/// Rows of an in-memory table must be this close to unit norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibrarySource {
    Initial,
    Supplemented,
}

/// Names are compared after trimming and case-folding.
pub fn name_key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Ordered, de-duplicated class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLibrary {
    names: Vec<String>,
    source: LibrarySource,
}

impl CategoryLibrary {
    pub fn new(names: Vec<String>, source: LibrarySource) -> Result<Self> {
        if names.is_empty() {
            return Err(EmbeddingError::Data("category library is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if name_key(n).is_empty() {
                return Err(EmbeddingError::Data("blank class name".into()));
            }
            if !seen.insert(name_key(n)) {
                return Err(EmbeddingError::Data(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names, source })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn source(&self) -> LibrarySource {
        self.source
    }

    pub fn contains(&self, name: &str) -> bool {
        let key = name_key(name);
        self.names.iter().any(|n| name_key(n) == key)
    }
}

/// Result of [`supplement_library`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Supplemented {
    pub library: CategoryLibrary,
    pub added: usize,
    pub dropped_duplicates: usize,
}

/// Appends `extra` names not already present, keeping the original order.
pub fn supplement_library(lib: &CategoryLibrary, extra: &[String]) -> Supplemented {
    let mut seen: HashSet<String> = lib.names.iter().map(|n| name_key(n)).collect();
    let mut names = lib.names.clone();
    let mut dropped = 0;
    for n in extra {
        let key = name_key(n);
        if key.is_empty() || !seen.insert(key) {
            dropped += 1;
            continue;
        }
        names.push(n.trim().to_string());
    }
    let added = names.len() - lib.names.len();
    let source = if added == 0 {
        lib.source
    } else {
        LibrarySource::Supplemented
    };
    Supplemented {
        library: CategoryLibrary { names, source },
        added,
        dropped_duplicates: dropped,
    }
}

/// Parses a supplement list: one name per line, blank lines and `#` comments skipped.
pub fn parse_name_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Unit-norm class embeddings aligned with a [`CategoryLibrary`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    dim: usize,
    rows: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::Data("embedding dim must be positive".into()));
        }
        if rows.len() != names.len() * dim {
            return Err(EmbeddingError::Data(format!(
                "{} names but {} values for dim {dim}",
                names.len(),
                rows.len()
            )));
        }
        for (i, row) in rows.chunks(dim).enumerate() {
            let norm = l2(row);
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(EmbeddingError::Data(format!(
                    "row {i} ({:?}) has norm {norm}",
                    names[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(name_key(n), i).is_some() {
                return Err(EmbeddingError::Data(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self {
            names,
            dim,
            rows,
            index,
        })
    }

    /// Normalises every row, then builds the table.
    pub fn from_unnormalized(names: Vec<String>, dim: usize, mut rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::Data("embedding dim must be positive".into()));
        }
        for (i, row) in rows.chunks_mut(dim).enumerate() {
            let norm = l2(row);
            if norm == 0.0 || !norm.is_finite() {
                return Err(EmbeddingError::Data(format!("row {i} cannot be normalised")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(names, dim, rows)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&name_key(name)).copied()
    }

    pub fn row_by_name(&self, name: &str) -> Result<&[f64]> {
        self.index_of(name)
            .map(|i| self.row(i))
            .ok_or_else(|| EmbeddingError::Data(format!("class {name:?} not in embedding table")))
    }

    /// Checks that every library class has a row.
    pub fn covers(&self, lib: &CategoryLibrary) -> Result<()> {
        match lib.names().iter().find(|n| self.index_of(n).is_none()) {
            Some(missing) => Err(EmbeddingError::Data(format!(
                "class {missing:?} not in embedding table"
            ))),
            None => Ok(()),
        }
    }

    /// Restricts the table to the library's classes, in library order.
    pub fn aligned_to(&self, lib: &CategoryLibrary) -> Result<Self> {
        self.covers(lib)?;
        let rows = lib
            .names()
            .iter()
            .flat_map(|n| self.row_by_name(n).expect("checked by covers").iter().copied())
            .collect();
        Self::new(lib.names().to_vec(), self.dim, rows)
    }
}

/// Per-class scores `S = {s_l}` for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl SimilarityScores {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn summary(&self) -> ScoreSummary {
        let n = self.values.len();
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = self.values.iter().sum::<f64>() / n.max(1) as f64;
        ScoreSummary { count: n, min, max, mean }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl std::fmt::Display for ScoreSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} scores, min {:.3e}, max {:.3e}, mean {:.3e}",
            self.count, self.min, self.max, self.mean
        )
    }
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity to every class divided by `temperature`, then softmax.
pub fn image_class_similarity(
    img: &[f64],
    table: &EmbeddingTable,
    temperature: f64,
) -> Result<SimilarityScores> {
    if img.len() != table.dim() {
        return Err(EmbeddingError::Contract(format!(
            "image embedding has dim {}, table has {}",
            img.len(),
            table.dim()
        )));
    }
    let norm = l2(img);
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(EmbeddingError::Contract(format!(
            "image embedding must be unit norm, got {norm}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(EmbeddingError::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    // Rows and image are unit norm, so the dot product is the cosine.
    let logits: Vec<f64> = (0..table.len())
        .map(|i| dot(img, table.row(i)) / temperature)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(SimilarityScores {
        values: exps.into_iter().map(|e| e / total).collect(),
        normalized: true,
    })
}

pub fn normalize(v: &mut [f64]) {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
