//! Dense double-precision tensors with a recorded reverse-mode tape.
//!
//! Values live in [`Tensor`]; differentiable computation happens on a
//! [`Tape`], which is rebuilt for every forward pass and consumed by
//! [`Tape::backward`]. Parameters enter the tape as leaves and receive their
//! gradients back through [`Tape::accumulate_grad`].

mod kernels;
pub mod nn;
mod rng;
mod tape;

pub use kernels::{matmul_into, matmul_naive};
pub use rng::RngState;
pub use tape::{OpKind, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("tape state error: {0}")]
    State(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Shape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "Tensor::new" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zero-filled tensor is always valid")
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(&[1], vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Config("ragged rows".into()));
        }
        Self::new(&[r, c], rows.concat())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let n = shape.iter().product();
        let data = rng.normal_vec(n, std);
        Self::new(shape, data).expect("gaussian samples are finite")
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers are responsible for keeping them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extents flattened; a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            r => self.shape[..r - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn add_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Dimension {
                op: "add_grad",
                left: self.shape.clone(),
                right: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, s: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(TensorError::Shape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
