//! Deterministic 20-class street-scene embedding table.
//!
//! No text encoder runs in this crate, so the committed fixture is
//! synthesised: every class gets a private random direction plus a shared
//! direction for its semantic group (flat, construction, object, nature,
//! human, vehicle). "minivan" is a small perturbation of "minibus", which
//! makes the pair the only one that merges under the default clustering
//! schedule.

use crate::embedding::{normalize, CategoryLibrary, EmbeddingTable, LibrarySource};
use crate::tensor::RngState;

pub const STREET_DIM: usize = 64;
pub const STREET_SEED: u64 = 20_240_601;

pub const STREET_CLASSES: [(&str, usize); 20] = [
    ("road", 0),
    ("sidewalk", 0),
    ("building", 1),
    ("wall", 1),
    ("fence", 1),
    ("pole", 2),
    ("traffic light", 2),
    ("traffic sign", 2),
    ("vegetation", 3),
    ("sky", 3),
    ("person", 4),
    ("rider", 4),
    ("car", 5),
    ("truck", 5),
    ("bus", 5),
    ("train", 5),
    ("motorcycle", 5),
    ("bicycle", 5),
    ("minibus", 5),
    ("minivan", 5),
];

const GROUPS: usize = 6;
const GROUP_WEIGHT: f64 = 0.5;
/// Norm of the perturbation separating "minivan" from "minibus".
const NEAR_DUPLICATE: f64 = 0.07;

/// Extra names appended by the static library supplement.
pub const STREET_SUPPLEMENT: &str = "\
# street-scene supplement, one name per line
road
car
person
building
sky
vegetation
minibus
minivan
traffic cone
manhole cover
";

pub fn street_names() -> Vec<String> {
    STREET_CLASSES.iter().map(|(n, _)| n.to_string()).collect()
}

pub fn street_table() -> EmbeddingTable {
    let mut rng = RngState::new(STREET_SEED);
    let groups: Vec<Vec<f64>> = (0..GROUPS).map(|_| unit(&mut rng)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (name, g) in STREET_CLASSES {
        let mut own = unit(&mut rng);
        if name == "minivan" {
            let bus = rows.last().expect("minibus precedes minivan").clone();
            let noise = unit(&mut rng);
            own = bus.iter().zip(&noise).map(|(b, n)| b + NEAR_DUPLICATE * n).collect();
            normalize(&mut own);
            rows.push(own);
            continue;
        }
        let mut row: Vec<f64> = own.iter().zip(&groups[g]).map(|(o, c)| o + GROUP_WEIGHT * c).collect();
        normalize(&mut row);
        rows.push(row);
    }
    EmbeddingTable::from_unnormalized(street_names(), STREET_DIM, rows.concat())
        .expect("synthetic rows are finite and non-zero")
}

pub fn street_library() -> CategoryLibrary {
    CategoryLibrary::new(street_names(), LibrarySource::Initial).expect("names are unique")
}

/// Classes visible in the sample street image.
pub const STREET_SCENE: [&str; 7] = ["road", "building", "sky", "car", "vegetation", "person", "minibus"];

/// A street image equally similar to every class in [`STREET_SCENE`].
///
/// The image is the minimum-norm combination of the scene rows with equal
/// dot products on all of them (`R^T G^{-1} 1`), plus a little noise, so the
/// scene classes tie for the top of the softmax and nothing else comes
/// close. "minivan" rides along with "minibus".
pub fn street_image(table: &EmbeddingTable) -> Vec<f64> {
    let rows: Vec<&[f64]> = STREET_SCENE
        .iter()
        .map(|n| table.row_by_name(n).expect("street class"))
        .collect();
    let gram: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| a.iter().zip(*b).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let weights = solve(gram, vec![1.0; rows.len()]);
    let mut img = vec![0.0; table.dim()];
    for (row, w) in rows.iter().zip(weights) {
        img.iter_mut().zip(*row).for_each(|(a, r)| *a += w * r);
    }
    normalize(&mut img);
    let noise = RngState::new(STREET_SEED).derive(7).normal_vec(table.dim(), 0.002);
    img.iter_mut().zip(noise).for_each(|(a, n)| *a += n);
    normalize(&mut img);
    img
}

/// Gaussian elimination with partial pivoting; `a` must be non-singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - tail) / a[r][r];
    }
    x
}

fn unit(rng: &mut RngState) -> Vec<f64> {
    let mut v = rng.normal_vec(STREET_DIM, 1.0);
    normalize(&mut v);
    v
}
