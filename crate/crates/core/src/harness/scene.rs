//! Toy street scenes on a patch grid.
//!
//! Each class has two visual modes: its text embedding row plus or minus a
//! private random direction, so text and pixels are related but not equal,
//! and a class's mean sits on its text row. Each object in a scene shows one
//! mode. Near-duplicate text rows (minibus/minivan) therefore give classes
//! with almost equal means that differ only in their modes, which no linear
//! read-out separates.
//! A style rotates every prototype by a fixed angle inside random planes and
//! sets the per-cell noise level; the knowledge and application sets share
//! prototypes and differ only in style. The scene's image embedding is built
//! from the text rows of the classes present, each weighted by the square
//! root of its area so small regions still register, and does not depend on
//! style.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::embedding::{normalize, EmbeddingTable};
use crate::tensor::{RngState, Tensor};

pub const TOY_ONTOLOGY: [&str; 8] = [
    "road",
    "car",
    "person",
    "building",
    "sky",
    "vegetation",
    "minibus",
    "minivan",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Style {
    /// Rotation angle (radians) applied to every prototype.
    pub rotation: f64,
    /// Expected L2 norm of the per-cell noise.
    pub noise: f64,
}

impl Style {
    pub fn validate(&self) -> Result<()> {
        if !self.rotation.is_finite() || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(HarnessError::Config(format!("invalid style {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Leading entries of [`TOY_ONTOLOGY`] in use.
    pub classes: usize,
    pub classes_per_scene: usize,
    /// Weight of the private visual direction in each prototype mode.
    pub visual_mix: f64,
    /// Expected L2 norm of the noise added to image embeddings.
    pub image_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            classes: TOY_ONTOLOGY.len(),
            classes_per_scene: 3,
            visual_mix: 0.5,
            image_noise: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.patches() == 0 {
            return bad("scene grid must be non-empty".into());
        }
        if self.classes == 0 || self.classes > TOY_ONTOLOGY.len() {
            return bad(format!("classes must be in 1..={}", TOY_ONTOLOGY.len()));
        }
        if self.classes_per_scene == 0
            || self.classes_per_scene > self.classes
            || self.classes_per_scene > self.patches()
        {
            return bad(format!(
                "classes_per_scene {} must be in 1..={}",
                self.classes_per_scene,
                self.classes.min(self.patches())
            ));
        }
        if !(self.visual_mix >= 0.0 && self.image_noise >= 0.0) {
            return bad("visual_mix and image_noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub height: usize,
    pub width: usize,
    /// Ontology index per cell, row-major.
    pub labels: Vec<usize>,
    /// Visual mode (0 or 1) per cell.
    pub modes: Vec<usize>,
    /// One feature row per cell (P×d).
    pub features: Tensor,
    pub image_embedding: Vec<f64>,
    /// Ontology indices of the classes present, ascending.
    pub present: Vec<usize>,
}

/// Prototypes, text rows and rotation planes shared by every style.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub config: SceneConfig,
    pub names: Vec<String>,
    pub text: Vec<Vec<f64>>,
    /// `prototypes[class][mode]`.
    pub prototypes: Vec<[Vec<f64>; 2]>,
    /// Orthonormal basis whose consecutive column pairs span the rotation planes.
    basis: Vec<Vec<f64>>,
}

impl ToyWorld {
    pub fn new(config: SceneConfig, table: &EmbeddingTable, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = table.dim();
        let names: Vec<String> = TOY_ONTOLOGY[..config.classes].iter().map(|s| s.to_string()).collect();
        let mut text = Vec::new();
        for n in &names {
            text.push(table.row_by_name(n)?.to_vec());
        }
        let prototypes = text
            .iter()
            .map(|t| {
                let v = rng.normal_vec(d, 1.0 / (d as f64).sqrt());
                [1.0, -1.0].map(|sign| {
                    let mut p: Vec<f64> = t.iter().zip(&v).map(|(a, b)| a + sign * config.visual_mix * b).collect();
                    normalize(&mut p);
                    p
                })
            })
            .collect();
        Ok(Self {
            config,
            names,
            text,
            prototypes,
            basis: orthonormal_basis(d, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Rotates `x` by `angle` inside every basis plane.
    pub fn rotate(&self, x: &[f64], angle: f64) -> Vec<f64> {
        if angle == 0.0 {
            return x.to_vec();
        }
        let (s, c) = angle.sin_cos();
        let mut coef: Vec<f64> = self.basis.iter().map(|b| dot(b, x)).collect();
        for pair in coef.chunks_mut(2) {
            if let [a, b] = pair {
                let (x0, y0) = (*a, *b);
                *a = c * x0 - s * y0;
                *b = s * x0 + c * y0;
            }
        }
        let mut out = vec![0.0; x.len()];
        for (b, k) in self.basis.iter().zip(&coef) {
            out.iter_mut().zip(b).for_each(|(o, v)| *o += k * v);
        }
        out
    }

    /// Draws one scene: a random class subset laid out as a Voronoi partition.
    pub fn generate_scene(&self, style: &Style, rng: &mut RngState) -> Result<ToyScene> {
        style.validate()?;
        let cfg = &self.config;
        let (h, w, d) = (cfg.height, cfg.width, self.dim());
        let mut r = rng.stream();
        let mut present: Vec<usize> = sample(&mut r, cfg.classes, cfg.classes_per_scene).into_vec();
        let seeds: Vec<usize> = sample(&mut r, h * w, present.len()).into_vec();
        let labels: Vec<usize> = (0..h * w)
            .map(|cell| {
                let (y, x) = ((cell / w) as f64, (cell % w) as f64);
                let nearest = seeds
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        let (sy, sx) = ((s / w) as f64, (s % w) as f64);
                        (k, (y - sy).powi(2) + (x - sx).powi(2))
                    })
                    .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
                present[nearest.0]
            })
            .collect();
        let object_modes: Vec<usize> = present.iter().map(|_| r.random_range(0..2)).collect();
        let modes: Vec<usize> = labels
            .iter()
            .map(|l| object_modes[present.iter().position(|p| p == l).expect("label is present")])
            .collect();
        present.sort_unstable();

        let cell_std = style.noise / (d as f64).sqrt();
        let rotated: Vec<[Vec<f64>; 2]> = self
            .prototypes
            .iter()
            .map(|p| [self.rotate(&p[0], style.rotation), self.rotate(&p[1], style.rotation)])
            .collect();
        let mut features = Vec::with_capacity(h * w * d);
        for (&l, &m) in labels.iter().zip(&modes) {
            features.extend(rotated[l][m].iter().map(|v| v + cell_std * r.sample::<f64, _>(rand_distr::StandardNormal)));
        }

        let mut img = vec![0.0; d];
        for &c in &present {
            let area = labels.iter().filter(|&&l| l == c).count() as f64 / (h * w) as f64;
            img.iter_mut().zip(&self.text[c]).for_each(|(a, t)| *a += area.sqrt() * t);
        }
        let img_std = cfg.image_noise / (d as f64).sqrt();
        img.iter_mut()
            .for_each(|a| *a += img_std * r.sample::<f64, _>(rand_distr::StandardNormal));
        normalize(&mut img);

        Ok(ToyScene {
            height: h,
            width: w,
            labels,
            modes,
            features: Tensor::new(&[h * w, d], features)?,
            image_embedding: img,
            present,
        })
    }

    /// `count` scenes, each drawn from its own derived stream.
    pub fn generate_set(&self, style: &Style, count: usize, rng: &RngState) -> Result<Vec<ToyScene>> {
        (0..count)
            .map(|i| self.generate_scene(style, &mut rng.derive(i as u64)))
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt on uniform random vectors.
fn orthonormal_basis(d: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut r = rng.stream();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
        for _ in 0..2 {
            for b in &basis {
                let k = dot(b, &v);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}
