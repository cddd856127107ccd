//! Analytic vs central-difference gradient checks.
//!
//! Every check reduces its output to a scalar with fixed random weights,
//! `loss = v · out · w`, so no output entry gets a trivial gradient. The
//! error reported per tensor is `max|a − n| / max(max|a|, max|n|, 1e-6)`.
//! The floor matters for gradients that vanish identically (attention key
//! biases shift every score of a query row equally, which softmax ignores):
//! there the central difference is pure rounding noise of order 1e-11.

use serde::{Deserialize, Serialize};

use crate::pff::{AttentionDirection, PffConfig, PffError, PffParams, Stages};
use crate::tensor::nn::{multi_head_attention, Attention, Binder, Linear, Mlp, Params};
use crate::tensor::{OpKind, RngState, Tape, Tensor, TensorError, Var};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    TensorCore,
    Pff,
    All,
}

impl Scope {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tensor_core" => Some(Scope::TensorCore),
            "pff" => Some(Scope::Pff),
            "all" => Some(Scope::All),
            _ => None,
        }
    }
}

/// One differentiated tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    /// `tensor_core/<op>` or `pff/<variant>`.
    pub group: String,
    /// Tensor-core op under test, if the group targets a single op.
    pub op: Option<String>,
    pub parameter: String,
    pub values: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Ops named by failing tensor-core checks.
    pub fn failing_ops(&self) -> Vec<String> {
        let mut ops: Vec<String> = self.failures().filter_map(|c| c.op.clone()).collect();
        ops.dedup();
        ops
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(SCALE_FLOOR, f64::max);
    diff / scale
}

/// Plain list of input tensors, differentiated like parameters.
#[derive(Debug, Clone)]
struct Inputs(Vec<Tensor>);

impl Params for Inputs {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, t) in self.0.iter().enumerate() {
            out.push((format!("{prefix}input{i}"), t));
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend(self.0.iter_mut());
    }
}

/// Records `params` on `tape` and returns the scalar loss.
type Build<'f, P> = dyn Fn(&P, &mut Binder) -> Result<Var, PffError> + 'f;

/// Scalar `v · out · w` with weights drawn from `rng`.
fn reduce(tape: &mut Tape, out: Var, rng: &mut RngState) -> Result<Var, TensorError> {
    let (r, c) = tape.dims(out);
    let v = tape.constant_from(1, r, rng.normal_vec(r, 1.0))?;
    let w = tape.constant_from(c, 1, rng.normal_vec(c, 1.0))?;
    let left = tape.matmul(v, out)?;
    tape.matmul(left, w)
}

fn check_params<P: Params>(
    group: &str,
    op: Option<OpKind>,
    params: &mut P,
    fault: Option<OpKind>,
    build: &Build<'_, P>,
) -> Result<Vec<Check>, PffError> {
    let mut tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let (loss, vars) = {
        let mut b = Binder::new(&mut tape);
        let loss = build(params, &mut b)?;
        (loss, b.into_vars())
    };
    tape.backward(loss)?;
    let names: Vec<String> = params.named_params("").into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.named_params(""))
        .map(|(v, (_, t))| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |p: &P| -> Result<f64, PffError> {
        let mut t = Tape::new();
        let mut b = Binder::new(&mut t);
        let loss = build(p, &mut b)?;
        Ok(t.value(loss)[0])
    };
    let mut checks = Vec::new();
    for (j, name) in names.into_iter().enumerate() {
        let n = analytic[j].len();
        let mut numeric = vec![0.0; n];
        for k in 0..n {
            let orig = params.params_mut()[j].data()[k];
            params.params_mut()[j].data_mut()[k] = orig + EPSILON;
            let plus = eval(params)?;
            params.params_mut()[j].data_mut()[k] = orig - EPSILON;
            let minus = eval(params)?;
            params.params_mut()[j].data_mut()[k] = orig;
            numeric[k] = (plus - minus) / (2.0 * EPSILON);
        }
        let err = relative_error(&analytic[j], &numeric);
        checks.push(Check {
            group: group.to_string(),
            op: op.map(|o| o.name().to_string()),
            parameter: name,
            values: n,
            max_rel_err: err,
            passed: err < TOLERANCE,
        });
    }
    Ok(checks)
}

fn randn(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_requires_grad(true)
}

/// One check per tape op plus the linear, MLP and attention blocks.
pub fn tensor_core_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<Check>, PffError> {
    let mut rng = RngState::new(seed);
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        let shapes: Vec<Vec<usize>> = match kind {
            OpKind::MatMul => vec![vec![3, 4], vec![4, 5]],
            OpKind::MatMulT => vec![vec![3, 4], vec![5, 4]],
            OpKind::Add => vec![vec![3, 4], vec![3, 4]],
            OpKind::AddRow => vec![vec![3, 4], vec![1, 4]],
            OpKind::ScaleRows => vec![vec![3, 4], vec![3, 1]],
            OpKind::ConcatRows => vec![vec![2, 4], vec![3, 4]],
            OpKind::ConcatCols => vec![vec![3, 2], vec![3, 3]],
            OpKind::CrossEntropy => vec![vec![4, 5]],
            _ => vec![vec![3, 5]],
        };
        let mut inputs = Inputs(shapes.iter().map(|s| randn(s, &mut rng)).collect());
        let weights = rng.derive(kind as u64 + 1);
        let build = |p: &Inputs, b: &mut Binder| -> Result<Var, PffError> {
            let xs: Vec<Var> = p.0.iter().map(|t| b.bind(t)).collect();
            let tape = &mut *b.tape;
            let y = match kind {
                OpKind::MatMul => tape.matmul(xs[0], xs[1])?,
                OpKind::MatMulT => tape.matmul_t(xs[0], xs[1])?,
                OpKind::Add => tape.add(xs[0], xs[1])?,
                OpKind::AddRow => tape.add_row(xs[0], xs[1])?,
                OpKind::ScaleRows => tape.scale_rows(xs[0], xs[1])?,
                OpKind::Gelu => tape.gelu(xs[0])?,
                OpKind::Softmax => tape.softmax_rows(xs[0])?,
                OpKind::Scale => tape.scale(xs[0], -1.7)?,
                OpKind::ConcatRows => tape.concat_rows(&xs)?,
                OpKind::ConcatCols => tape.concat_cols(&xs)?,
                OpKind::SliceCols => tape.slice_cols(xs[0], 1, 3)?,
                OpKind::Transpose => tape.transpose(xs[0])?,
                OpKind::MeanRows => tape.mean_rows(xs[0])?,
                OpKind::Sum => return Ok(tape.sum(xs[0])?),
                OpKind::CrossEntropy => return Ok(tape.cross_entropy(xs[0], &[0, 3, 1, 4])?),
            };
            Ok(reduce(tape, y, &mut weights.clone())?)
        };
        out.extend(check_params(&format!("tensor_core/{}", kind.name()), Some(kind), &mut inputs, fault, &build)?);
    }

    let mut lin = Linear::new(4, 3, &mut rng);
    lin.bias = randn(&[1, 3], &mut rng);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let w = rng.derive(101);
    out.extend(check_params("tensor_core/linear", None, &mut lin, fault, &|p: &Linear, b: &mut Binder| {
        let v = p.bind(b);
        let xv = b.tape.constant(&x);
        let y = v.forward(b.tape, xv)?;
        Ok(reduce(b.tape, y, &mut w.clone())?)
    })?);

    let mut mlp = Mlp::new(4, 3, 4, &mut rng);
    let w = rng.derive(102);
    out.extend(check_params("tensor_core/mlp", None, &mut mlp, fault, &|p: &Mlp, b: &mut Binder| {
        let v = p.bind(b);
        let xv = b.tape.constant(&x);
        let y = v.forward(b.tape, xv)?;
        Ok(reduce(b.tape, y, &mut w.clone())?)
    })?);

    let mut attn = Attention::new(4, 2, &mut rng)?;
    let q = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let kv = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = rng.derive(103);
    out.extend(check_params("tensor_core/attention", None, &mut attn, fault, &|p: &Attention, b: &mut Binder| {
        let v = p.bind(b);
        let qv = b.tape.constant(&q);
        let kvv = b.tape.constant(&kv);
        let y = multi_head_attention(b.tape, qv, kvv, kvv, &v)?.output;
        Ok(reduce(b.tape, y, &mut w.clone())?)
    })?);
    Ok(out)
}

/// Every [`PffParams`] tensor, for each stage layout and attention direction.
///
/// The output MLP's last layer is re-drawn at random: at its zero
/// initialisation every upstream gradient vanishes and the check would be
/// vacuous.
pub fn pff_checks(seed: u64, fault: Option<OpKind>) -> Result<Vec<Check>, PffError> {
    let (d, c, k, p) = (6, 8, 2, 4);
    let mut rng = RngState::new(seed);
    let f_i = Tensor::randn(&[p, c], 1.0, &mut rng);
    let f_cls = Tensor::randn(&[k, d], 1.0, &mut rng);
    let p_sim = Tensor::new(&[k], rng.uniform_vec(k, 0.2, 1.0))?;
    let adapter = Tensor::randn(&[d, c], 0.5, &mut rng);
    let layouts = [
        ("full", Stages::Full, AttentionDirection::ImageQuery),
        ("self_only", Stages::SelfOnly, AttentionDirection::ImageQuery),
        ("cross_only", Stages::CrossOnly, AttentionDirection::ImageQuery),
        ("text_query", Stages::Full, AttentionDirection::TextQuery),
    ];
    let mut out = Vec::new();
    for (label, stages, direction) in layouts {
        let cfg = PffConfig {
            tokens: 3,
            heads: 2,
            hidden_mult: 2,
            direction,
            stages,
            ..PffConfig::default()
        };
        let mut params = PffParams::new(&cfg, d, c, &mut rng)?;
        params.out_mlp.fc2.weight = Tensor::randn(&[params.out_mlp.fc2.d_in(), c], 0.3, &mut rng).with_requires_grad(true);
        params.tokens = Tensor::randn(params.tokens.shape(), 0.5, &mut rng).with_requires_grad(true);
        let w = rng.derive(200);
        let build = |pp: &PffParams, b: &mut Binder| -> Result<Var, PffError> {
            let vars = pp.bind(b);
            let tape = &mut *b.tape;
            let fi = tape.constant(&f_i);
            let cls = tape.constant(&f_cls);
            let ps = tape.constant(&p_sim);
            let a = tape.constant(&adapter);
            let y = vars.forward(tape, &cfg, fi, cls, ps, Some(a))?.output;
            Ok(reduce(tape, y, &mut w.clone())?)
        };
        out.extend(check_params(&format!("pff/{label}"), None, &mut params, fault, &build)?);
    }
    Ok(out)
}

pub fn run(scope: Scope, seed: u64, fault: Option<OpKind>) -> Result<GradcheckReport, PffError> {
    let mut checks = Vec::new();
    if matches!(scope, Scope::TensorCore | Scope::All) {
        checks.extend(tensor_core_checks(seed, fault)?);
    }
    if matches!(scope, Scope::Pff | Scope::All) {
        checks.extend(pff_checks(seed, fault)?);
    }
    Ok(GradcheckReport {
        epsilon: EPSILON,
        tolerance: TOLERANCE,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_tape_passes() {
        let r = run(Scope::All, 1, None).unwrap();
        assert!(r.passed, "{:?}", r.failures().collect::<Vec<_>>());
    }

    #[test]
    fn injected_fault_is_reported_by_op() {
        let r = run(Scope::TensorCore, 1, Some(OpKind::Softmax)).unwrap();
        assert!(!r.passed);
        assert!(r.failing_ops().contains(&"softmax_rows".to_string()));
        assert!(!r.failing_ops().contains(&"gelu".to_string()));
    }
}
