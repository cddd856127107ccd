use super::kernels::{
    gelu, gelu_grad, matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows_in_place,
};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Differentiable operation kinds, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulT,
    Add,
    AddRow,
    ScaleRows,
    Gelu,
    Softmax,
    Scale,
    ConcatRows,
    ConcatCols,
    SliceCols,
    Transpose,
    MeanRows,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Add,
        OpKind::AddRow,
        OpKind::ScaleRows,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::Scale,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::Transpose,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax_rows",
            OpKind::Scale => "scale",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::Transpose => "transpose",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Gelu(Var),
    Softmax(Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Scale(..) => OpKind::Scale,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Transpose(..) => OpKind::Transpose,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
        })
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded operation graph for one forward pass.
///
/// Every tape value is a `rows×cols` matrix. Scalars are `1×1`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong.
    /// Only used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records `t` as a constant regardless of its `requires_grad` flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_raw(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(TensorError::Shape {
                shape: vec![rows, cols],
                len: value.len(),
            });
        }
        Ok(self.push_raw(rows, cols, value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("tape values are finite")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds the gradient recorded for leaf `v` into `t`'s gradient slot.
    pub fn accumulate_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if !self.consumed {
            return Err(TensorError::State("backward has not run".into()));
        }
        match self.grad(v) {
            Some(g) => t.add_grad(g),
            None => {
                if t.requires_grad() {
                    t.add_grad(&vec![0.0; t.numel()])
                } else {
                    Ok(())
                }
            }
        }
    }

    fn push_raw(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::State("tape already consumed by backward".into()));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleRows(a, b) => self.needs(*a) || self.needs(*b),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(|v| self.needs(*v)),
            Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Scale(a, _)
            | Op::SliceCols(a, _)
            | Op::Transpose(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::CrossEntropy(a, _) => self.needs(*a),
        };
        Ok(self.push_raw(rows, cols, value, op, needs_grad))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        TensorError::Dimension {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.dim_err("add", a, b));
        }
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b), "add")
    }

    /// Adds the single row `b` (1×cols) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(b) != (1, c) {
            return Err(self.dim_err("add_row", a, b));
        }
        let bias = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        self.push(r, c, out, Op::AddRow(a, b), "add_row")
    }

    /// Multiplies row `i` of `a` by the scalar `s[i]`, i.e. `a ∘ expand(s, dim = cols)`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (sr, sc) = self.dims(s);
        if sr * sc != r {
            return Err(self.dim_err("scale_rows", a, s));
        }
        let scales = self.value(s);
        let out = self
            .value(a)
            .chunks(c)
            .zip(scales)
            .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
            .collect();
        self.push(r, c, out, Op::ScaleRows(a, s), "scale_rows")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a), "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        softmax_rows_in_place(&mut out, c);
        self.push(r, c, out, Op::Softmax(a), "softmax_rows")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s), "scale")
    }

    /// Stacks inputs along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_rows of nothing".into()))?;
        let c = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Joins inputs side by side along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_cols of nothing".into()))?;
        let r = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if width == 0 || start + width > c {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, width],
            });
        }
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        self.push(r, width, out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a), "transpose")
    }

    /// Column means, producing a single row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(1, c, out, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a), "sum")
    }

    /// Mean softmax cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if labels.len() != r {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                left: vec![r, c],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &y) in self.value(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        self.push(
            1,
            1,
            vec![total / r as f64],
            Op::CrossEntropy(logits, labels.to_vec()),
            "cross_entropy",
        )
    }

    /// Reverse sweep from the scalar `loss`. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::State("backward called twice on the same tape".into()));
        }
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        self.consumed = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let factor = if op.kind() == self.fault { 1.1 } else { 1.0 };
            for (v, mut gin) in self.input_grads(i, &op, &g) {
                if factor != 1.0 {
                    gin.iter_mut().for_each(|x| *x *= factor);
                }
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&gin).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(gin),
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `i` (with upstream `g`) into its inputs.
    fn input_grads(&self, i: usize, op: &Op, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g, self.value(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(self.value(*a), g, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a·bᵀ with a m×k, b n×k
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, self.value(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_into(g, self.value(*a), &mut gb, m, n, k);
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                    out.push((*b, gb));
                }
            }
            Op::ScaleRows(a, s) => {
                let scales = self.value(*s);
                if self.needs(*a) {
                    let ga = g
                        .chunks(c)
                        .zip(scales)
                        .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
                        .collect();
                    out.push((*a, ga));
                }
                if self.needs(*s) {
                    let gs = g
                        .chunks(c)
                        .zip(self.value(*a).chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    out.push((*s, gs));
                }
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(gv, &x)| gv * gelu_grad(x))
                    .collect();
                out.push((*a, ga));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = vec![0.0; r * c];
                for ((gr, yr), outr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, z)| x * z).sum();
                    for ((o, gv), yv) in outr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                out.push((*a, ga));
            }
            Op::Scale(a, s) => out.push((*a, g.iter().map(|x| x * s).collect())),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        out.push((p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.needs(p) {
                        let gp = g
                            .chunks(c)
                            .flat_map(|row| row[col..col + pc].iter().copied())
                            .collect();
                        out.push((p, gp));
                    }
                    col += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.dims(*a).1;
                let mut ga = vec![0.0; r * ac];
                for (dst, src) in ga.chunks_mut(ac).zip(g.chunks(c)) {
                    dst[*start..*start + c].copy_from_slice(src);
                }
                out.push((*a, ga));
            }
            Op::Transpose(a) => {
                // node is c_a×r_a; input is r×c of the node swapped
                let mut ga = vec![0.0; r * c];
                for p in 0..r {
                    for q in 0..c {
                        ga[q * r + p] = g[p * c + q];
                    }
                }
                out.push((*a, ga));
            }
            Op::MeanRows(a) => {
                let ar = self.dims(*a).0;
                let inv = 1.0 / ar as f64;
                let ga = (0..ar).flat_map(|_| g.iter().map(|x| x * inv)).collect();
                out.push((*a, ga));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).len()])),
            Op::CrossEntropy(a, labels) => {
                let (ar, ac) = self.dims(*a);
                let mut ga = self.value(*a).to_vec();
                softmax_rows_in_place(&mut ga, ac);
                let scale = g[0] / ar as f64;
                for (row, &y) in ga.chunks_mut(ac).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*a, ga));
            }
        }
        out
    }
}
