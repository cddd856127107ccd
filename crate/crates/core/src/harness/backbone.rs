//! Frozen stand-in for a vision foundation model.

use sha2::{Digest, Sha256};

use crate::pff::checkpoint_bytes;
use crate::tensor::{RngState, Tape, Tensor, Var};

use super::Result;

/// Patchifier plus `N` residual blocks `x ← x + GELU(x·W_i)`.
///
/// Every weight is frozen: it enters the tape as a constant and is never
/// handed to the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct MockBackbone {
    /// d×c projection from cell features to patch tokens.
    pub patchifier: Tensor,
    pub layers: Vec<Tensor>,
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub patchifier: Var,
    pub layers: Vec<Var>,
}

impl MockBackbone {
    pub fn new(input_dim: usize, width: usize, depth: usize, rng: &mut RngState) -> Self {
        let patchifier = Tensor::randn(&[input_dim, width], 1.0 / (input_dim as f64).sqrt(), rng);
        let layers = (0..depth)
            .map(|_| Tensor::randn(&[width, width], 1.0 / (width as f64).sqrt(), rng))
            .collect();
        Self { patchifier, layers }
    }

    pub fn width(&self) -> usize {
        self.patchifier.cols()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn named_weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("patchifier".to_string(), &self.patchifier)];
        for (i, w) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}"), w));
        }
        out
    }

    /// SHA-256 (hex) of the serialised weights.
    pub fn weights_hash(&self) -> String {
        let digest = Sha256::digest(checkpoint_bytes(&self.named_weights()));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            patchifier: tape.constant(&self.patchifier),
            layers: self.layers.iter().map(|w| tape.constant(w)).collect(),
        }
    }
}

impl BackboneVars {
    pub fn patchify(&self, tape: &mut Tape, cells: Var) -> Result<Var> {
        Ok(tape.matmul(cells, self.patchifier)?)
    }

    /// Output of layer `i` given its input.
    pub fn layer(&self, tape: &mut Tape, i: usize, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.layers[i])?;
        let h = tape.gelu(h)?;
        Ok(tape.add(x, h)?)
    }
}
