//! Parameterised building blocks on top of the tape.
//!
//! Parameters are plain [`Tensor`]s owned by the layer structs. For each
//! forward pass a [`Binder`] records them as tape leaves in a fixed visiting
//! order; after backward the same order is used to hand gradients back.

use serde::{Deserialize, Serialize};

use super::{RngState, Result, Tape, Tensor, TensorError, Var};

/// Records parameters on a tape and remembers the order they were bound in.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    vars: Vec<Var>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Self { tape, vars: Vec::new() }
    }

    pub fn bind(&mut self, t: &Tensor) -> Var {
        let v = self.tape.leaf(t);
        self.vars.push(v);
        v
    }

    pub fn into_vars(self) -> Vec<Var> {
        self.vars
    }
}

/// Anything that owns trainable tensors.
pub trait Params {
    /// Visits parameters in binding order with dotted names under `prefix`.
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngState) -> Self {
        let std = (2.0 / (d_in + d_out) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[d_in, d_out], std, rng).with_requires_grad(true),
            bias: Tensor::zeros(&[1, d_out]).with_requires_grad(true),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]).with_requires_grad(true),
            bias: Tensor::zeros(&[1, d_out]).with_requires_grad(true),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(&[d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        Self {
            weight: w.with_requires_grad(true),
            bias: Tensor::zeros(&[1, d]).with_requires_grad(true),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, b: &mut Binder) -> LinearVars {
        LinearVars {
            weight: b.bind(&self.weight),
            bias: b.bind(&self.bias),
        }
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, cols) = tape.dims(x);
        let (w_in, _) = tape.dims(self.weight);
        if cols != w_in {
            return Err(TensorError::Config(format!(
                "linear layer expects width {w_in}, input has {cols}"
            )));
        }
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

impl Params for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Linear → GELU → Linear, hidden width `hidden_mult · d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl Mlp {
    pub fn new(d_in: usize, d_out: usize, hidden_mult: usize, rng: &mut RngState) -> Self {
        let hidden = hidden_mult * d_in;
        Self {
            fc1: Linear::new(d_in, hidden, rng),
            fc2: Linear::new(hidden, d_out, rng),
        }
    }

    /// Same as [`Mlp::new`] but with the output layer zeroed, so the block
    /// initially outputs exactly zero.
    pub fn new_zero_out(d_in: usize, d_out: usize, hidden_mult: usize, rng: &mut RngState) -> Self {
        let hidden = hidden_mult * d_in;
        Self {
            fc1: Linear::new(d_in, hidden, rng),
            fc2: Linear::zeros(hidden, d_out),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> MlpVars {
        MlpVars {
            fc1: self.fc1.bind(b),
            fc2: self.fc2.bind(b),
        }
    }
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.fc1.visit_mut(out);
        self.fc2.visit_mut(out);
    }
}

/// Convenience for one-off MLP evaluation on a fresh tape.
pub fn mlp_forward(x: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = mlp.bind(&mut Binder::new(&mut tape));
    let y = vars.forward(&mut tape, xv)?;
    Ok(tape.tensor(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub width: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(TensorError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(self.width / self.heads)
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub heads: usize,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub out: LinearVars,
}

impl Attention {
    pub fn new(width: usize, heads: usize, rng: &mut RngState) -> Result<Self> {
        AttentionShape { width, heads }.head_dim()?;
        Ok(Self {
            heads,
            q: Linear::new(width, width, rng),
            k: Linear::new(width, width, rng),
            v: Linear::new(width, width, rng),
            out: Linear::new(width, width, rng),
        })
    }

    pub fn identity(width: usize, heads: usize) -> Result<Self> {
        AttentionShape { width, heads }.head_dim()?;
        Ok(Self {
            heads,
            q: Linear::identity(width),
            k: Linear::identity(width),
            v: Linear::identity(width),
            out: Linear::identity(width),
        })
    }

    pub fn bind(&self, b: &mut Binder) -> AttentionVars {
        AttentionVars {
            heads: self.heads,
            q: self.q.bind(b),
            k: self.k.bind(b),
            v: self.v.bind(b),
            out: self.out.bind(b),
        }
    }
}

impl Params for Attention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.q.visit(&join(prefix, "q"), out);
        self.k.visit(&join(prefix, "k"), out);
        self.v.visit(&join(prefix, "v"), out);
        self.out.visit(&join(prefix, "out"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.q.visit_mut(out);
        self.k.visit_mut(out);
        self.v.visit_mut(out);
        self.out.visit_mut(out);
    }
}

/// Output of [`multi_head_attention`]: the projected result plus the
/// per-head attention weight matrices (`Lq×Lk` each).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads, scale `1/sqrt(d/heads)`.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    params: &AttentionVars,
) -> Result<AttentionOutput> {
    let (_, d) = tape.dims(query);
    let (lk, dk_in) = tape.dims(key);
    let (lv, dv_in) = tape.dims(value);
    if dk_in != d || dv_in != d || lk != lv {
        return Err(TensorError::Dimension {
            op: "multi_head_attention",
            left: vec![lk, dk_in],
            right: vec![lv, dv_in],
        });
    }
    let head_dim = AttentionShape { width: d, heads: params.heads }.head_dim()?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = params.q.forward(tape, query)?;
    let k = params.k.forward(tape, key)?;
    let v = params.v.forward(tape, value)?;

    let mut head_outputs = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let start = h * head_dim;
        let (qh, kh, vh) = if params.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, start, head_dim)?,
                tape.slice_cols(k, start, head_dim)?,
                tape.slice_cols(v, start, head_dim)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if params.heads == 1 {
        head_outputs[0]
    } else {
        tape.concat_cols(&head_outputs)?
    };
    let output = params.out.forward(tape, merged)?;
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mlp_gives_zero() {
        let mut mlp = Mlp::new(3, 2, 4, &mut RngState::new(1));
        for p in mlp.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let y = mlp_forward(&x, &mlp).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hidden_width_is_four_times_input() {
        let mlp = Mlp::new(5, 3, 4, &mut RngState::new(1));
        assert_eq!(mlp.fc1.d_out(), 20);
        assert_eq!(mlp.fc2.d_in(), 20);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(
            Attention::new(6, 4, &mut RngState::new(0)),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn named_params_are_dotted() {
        let mlp = Mlp::new(2, 2, 4, &mut RngState::new(0));
        let names: Vec<_> = mlp.named_params("fuse").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["fuse.fc1.weight", "fuse.fc1.bias", "fuse.fc2.weight", "fuse.fc2.bias"]);
    }
}
