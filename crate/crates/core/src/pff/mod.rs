//! Prompt-guided feature focuser.
//!
//! One [`PffParams`] block sits on each frozen backbone layer. Given the
//! layer's patch features `F_i` (P×c) and the image's prompt selection it
//! computes
//!
//! ```text
//! F_fuse  = MLP_fuse(F_cls ∘ expand(p_sim))          K×d  (→ K×c via adapter)
//! F_enh   = concat(T_i, F_fuse)                      (m+K)×c
//! S       = SelfAttn(F_enh)
//! X       = CrossAttn(query = F_i, key = value = S)  P×c
//! F_final = MLP_out(X) + F_i
//! ```
//!
//! `MLP_out` ends in a zero-initialised layer, so a fresh block is an exact
//! identity on `F_i`.

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, parse_checkpoint, read_checkpoint, restore, write_checkpoint, CHECKPOINT_MAGIC,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dcp::PromptSelection;
use crate::embedding::{EmbeddingError, EmbeddingTable};
use crate::tensor::nn::{multi_head_attention, Attention, AttentionVars, Binder, Linear, Mlp, MlpVars, Params};
use crate::tensor::{RngState, Tape, Tensor, TensorError, Var};

/// Added to the log-range denominator of [`normalize_similarity`].
pub const LOG_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint error at byte offset {offset}: {message}")]
    Checkpoint { offset: u64, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PffError>;

/// Which side supplies the cross-attention queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDirection {
    /// Patches query the self-attended prompt sequence; output is P×c.
    #[default]
    ImageQuery,
    /// Prompt sequence queries the patches; the (m+K)×c result is mean-pooled
    /// and broadcast onto every patch.
    TextQuery,
}

/// Which attention stages the block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stages {
    #[default]
    Full,
    /// Self-attention only; its pooled output is added to every patch before
    /// the output MLP.
    SelfOnly,
    /// Cross-attention straight from `F_enh`.
    CrossOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PffConfig {
    /// Learnable token count `m`.
    pub tokens: usize,
    pub heads: usize,
    pub hidden_mult: usize,
    pub token_std: f64,
    pub direction: AttentionDirection,
    /// Adds `F_enh` back onto the self-attention output.
    pub self_residual: bool,
    /// Feeds `F_i + CrossAtt(…)` rather than `CrossAtt(…)` to the output MLP.
    pub query_residual: bool,
    /// Set by the caller per experiment variant, not by configuration files.
    #[serde(skip)]
    pub stages: Stages,
}

impl Default for PffConfig {
    fn default() -> Self {
        Self {
            tokens: 75,
            heads: 4,
            hidden_mult: 4,
            token_std: 0.02,
            direction: AttentionDirection::ImageQuery,
            self_residual: false,
            query_residual: false,
            stages: Stages::Full,
        }
    }
}

/// Trainable parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct PffParams {
    pub fusion: Mlp,
    pub tokens: Tensor,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub out_mlp: Mlp,
    pub heads: usize,
}

impl PffParams {
    /// `prompt_dim` is the embedding width `d`, `width` the backbone width `c`.
    pub fn new(cfg: &PffConfig, prompt_dim: usize, width: usize, rng: &mut RngState) -> Result<Self> {
        if cfg.tokens == 0 {
            return Err(PffError::Config("token count must be at least 1".into()));
        }
        Ok(Self {
            fusion: Mlp::new(prompt_dim, prompt_dim, cfg.hidden_mult, rng),
            tokens: Tensor::randn(&[cfg.tokens, width], cfg.token_std, rng).with_requires_grad(true),
            self_attn: {
                let mut a = Attention::new(width, cfg.heads, rng)?;
                if cfg.self_residual {
                    // Starts as an identity on F_enh, like the output MLP.
                    a.out = Linear::zeros(width, width);
                }
                a
            },
            cross_attn: Attention::new(width, cfg.heads, rng)?,
            out_mlp: Mlp::new_zero_out(width, width, cfg.hidden_mult, rng),
            heads: cfg.heads,
        })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn bind(&self, b: &mut Binder) -> PffVars {
        PffVars {
            fusion: self.fusion.bind(b),
            tokens: b.bind(&self.tokens),
            self_attn: self.self_attn.bind(b),
            cross_attn: self.cross_attn.bind(b),
            out_mlp: self.out_mlp.bind(b),
        }
    }
}

impl Params for PffParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.fusion.visit(&p("fusion"), out);
        out.push((p("tokens"), &self.tokens));
        self.self_attn.visit(&p("self_attn"), out);
        self.cross_attn.visit(&p("cross_attn"), out);
        self.out_mlp.visit(&p("out_mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.fusion.visit_mut(out);
        out.push(&mut self.tokens);
        self.self_attn.visit_mut(out);
        self.cross_attn.visit_mut(out);
        self.out_mlp.visit_mut(out);
    }
}

/// Tape handles for one bound [`PffParams`].
#[derive(Debug, Clone, Copy)]
pub struct PffVars {
    pub fusion: MlpVars,
    pub tokens: Var,
    pub self_attn: AttentionVars,
    pub cross_attn: AttentionVars,
    pub out_mlp: MlpVars,
}

/// Frozen random projection from prompt width `d` to backbone width `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthAdapter {
    pub proj: Tensor,
}

impl WidthAdapter {
    pub fn new(d: usize, c: usize, rng: &mut RngState) -> Self {
        Self {
            proj: Tensor::randn(&[d, c], 1.0 / (d as f64).sqrt(), rng),
        }
    }
}

/// Intermediate values of one block, exposed for inspection and tests.
#[derive(Debug, Clone)]
pub struct PffTrace {
    pub fused: Var,
    pub enhanced: Var,
    pub self_attended: Option<Var>,
    pub cross_attended: Option<Var>,
    pub attention_weights: Vec<Var>,
    pub output: Var,
}

impl PffVars {
    /// Runs one block on the tape.
    ///
    /// `f_cls` is K×d, `p_sim` holds K weights, `f_i` is P×c. `adapter` must
    /// be given exactly when `d != c`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        cfg: &PffConfig,
        f_i: Var,
        f_cls: Var,
        p_sim: Var,
        adapter: Option<Var>,
    ) -> Result<PffTrace> {
        let (_, c) = tape.dims(f_i);
        let (_, d) = tape.dims(f_cls);
        let fused = fuse(tape, f_cls, p_sim, &self.fusion)?;
        let fused = match adapter {
            Some(a) => tape.matmul(fused, a)?,
            None if d == c => fused,
            None => {
                return Err(PffError::Config(format!(
                    "prompt width {d} differs from feature width {c} and no adapter is configured"
                )))
            }
        };
        if tape.dims(fused).1 != c {
            return Err(PffError::Config(format!(
                "adapter maps prompts to width {}, features have {c}",
                tape.dims(fused).1
            )));
        }
        let enhanced = tape.concat_rows(&[self.tokens, fused])?;
        let mut weights = Vec::new();

        let self_attended = match cfg.stages {
            Stages::Full | Stages::SelfOnly => {
                let s = multi_head_attention(tape, enhanced, enhanced, enhanced, &self.self_attn)?;
                weights.extend(s.weights);
                Some(if cfg.self_residual {
                    tape.add(enhanced, s.output)?
                } else {
                    s.output
                })
            }
            Stages::CrossOnly => None,
        };
        let text = self_attended.unwrap_or(enhanced);

        let (cross_attended, output) = match (cfg.stages, cfg.direction) {
            (Stages::SelfOnly, _) => {
                // No cross stage: every patch sees the pooled prompt context.
                let pooled = tape.mean_rows(text)?;
                let x = tape.add_row(f_i, pooled)?;
                let mixed = self.out_mlp.forward(tape, x)?;
                (None, tape.add(mixed, f_i)?)
            }
            (_, AttentionDirection::ImageQuery) => {
                let x = multi_head_attention(tape, f_i, text, text, &self.cross_attn)?;
                weights.extend(x.weights);
                let input = if cfg.query_residual {
                    tape.add(f_i, x.output)?
                } else {
                    x.output
                };
                let mixed = self.out_mlp.forward(tape, input)?;
                (Some(x.output), tape.add(mixed, f_i)?)
            }
            (_, AttentionDirection::TextQuery) => {
                let x = multi_head_attention(tape, text, f_i, f_i, &self.cross_attn)?;
                weights.extend(x.weights);
                let mixed = self.out_mlp.forward(tape, x.output)?;
                let pooled = tape.mean_rows(mixed)?;
                (Some(x.output), tape.add_row(f_i, pooled)?)
            }
        };
        Ok(PffTrace {
            fused,
            enhanced,
            self_attended,
            cross_attended,
            attention_weights: weights,
            output,
        })
    }
}

/// `F_cls`: the frozen embedding rows of the selected classes, in selection order.
pub fn encode_class_prompts(selection: &PromptSelection, table: &EmbeddingTable) -> Result<Tensor> {
    if selection.is_empty() {
        return Err(PffError::Contract("empty prompt selection".into()));
    }
    let mut data = Vec::with_capacity(selection.len() * table.dim());
    for name in &selection.cls {
        data.extend_from_slice(table.row_by_name(name)?);
    }
    Ok(Tensor::new(&[selection.len(), table.dim()], data)?)
}

/// Min-max normalisation of log-probabilities into `[0, 1]`.
///
/// All-equal inputs (including a single prompt) map to all ones.
pub fn normalize_similarity(sim: &[f64]) -> Result<Tensor> {
    if sim.is_empty() {
        return Err(PffError::Contract("empty similarity prompt".into()));
    }
    if let Some(bad) = sim.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(PffError::Contract(format!(
            "similarity values must be positive, got {bad}"
        )));
    }
    let logs: Vec<f64> = sim.iter().map(|s| s.ln()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = if hi == lo {
        vec![1.0; sim.len()]
    } else {
        logs.iter().map(|l| (l - lo) / (hi - lo + LOG_NORM_EPS)).collect()
    };
    Ok(Tensor::new(&[sim.len()], p)?)
}

/// `MLP(F_cls ∘ expand(p_sim, dim = d))` on the tape.
pub fn fuse(tape: &mut Tape, f_cls: Var, p_sim: Var, mlp: &MlpVars) -> Result<Var> {
    let (k, _) = tape.dims(f_cls);
    let (pr, pc) = tape.dims(p_sim);
    if pr * pc != k {
        return Err(PffError::Tensor(TensorError::Dimension {
            op: "fuse",
            left: vec![k, tape.dims(f_cls).1],
            right: vec![pr * pc],
        }));
    }
    let scaled = tape.scale_rows(f_cls, p_sim)?;
    Ok(mlp.forward(tape, scaled)?)
}

/// Prompt inputs for one image: `F_cls` and `p_sim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptInputs {
    pub f_cls: Tensor,
    pub p_sim: Tensor,
}

impl PromptInputs {
    pub fn from_selection(selection: &PromptSelection, table: &EmbeddingTable) -> Result<Self> {
        Ok(Self {
            f_cls: encode_class_prompts(selection, table)?,
            p_sim: normalize_similarity(&selection.sim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.f_cls.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Evaluates one block outside any training loop.
pub fn pff_layer_forward(
    f_i: &Tensor,
    prompts: &PromptInputs,
    params: &PffParams,
    cfg: &PffConfig,
    adapter: Option<&WidthAdapter>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f_i);
    let cls = tape.constant(&prompts.f_cls);
    let p = tape.constant(&prompts.p_sim);
    let a = adapter.map(|a| tape.constant(&a.proj));
    let vars = params.bind(&mut Binder::new(&mut tape));
    let trace = vars.forward(&mut tape, cfg, fv, cls, p, a)?;
    Ok(tape.tensor(trace.output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingTable;

    fn selection(names: &[&str], sim: &[f64]) -> PromptSelection {
        PromptSelection {
            cls: names.iter().map(|s| s.to_string()).collect(),
            sim: sim.to_vec(),
            iterations_used: 1,
            final_tau_f: 0.0,
            final_tau_c: 0.0,
            meta: None,
        }
    }

    fn table(n: usize, d: usize) -> EmbeddingTable {
        let rows = RngState::new(99).normal_vec(n * d, 1.0);
        EmbeddingTable::from_unnormalized((0..n).map(|i| format!("c{i}")).collect(), d, rows).unwrap()
    }

    #[test]
    fn log_normalisation_cases() {
        assert_eq!(normalize_similarity(&[0.5, 0.5]).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(normalize_similarity(&[0.2]).unwrap().data(), &[1.0]);
        let p = normalize_similarity(&[(-1f64).exp(), (-2f64).exp()]).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-11);
        assert_eq!(p.data()[1], 0.0);
        assert!(normalize_similarity(&[0.5, 0.0]).is_err());
        assert!(normalize_similarity(&[0.5, -0.1]).is_err());
    }

    #[test]
    fn encode_looks_up_rows_in_selection_order() {
        let t = table(4, 3);
        let f = encode_class_prompts(&selection(&["c2", "c0"], &[0.5, 0.4]), &t).unwrap();
        assert_eq!(f.row(0), t.row(2));
        assert_eq!(f.row(1), t.row(0));
        assert!(encode_class_prompts(&selection(&["nope"], &[1.0]), &t).is_err());
    }

    #[test]
    fn residual_identity_at_init() {
        let cfg = PffConfig { tokens: 3, heads: 2, ..Default::default() };
        let mut rng = RngState::new(5);
        let params = PffParams::new(&cfg, 8, 8, &mut rng).unwrap();
        let t = table(4, 8);
        let prompts = PromptInputs::from_selection(&selection(&["c1", "c3"], &[0.3, 0.2]), &t).unwrap();
        let f_i = Tensor::randn(&[4, 8], 1.0, &mut rng);
        for stages in [Stages::Full, Stages::SelfOnly, Stages::CrossOnly] {
            for direction in [AttentionDirection::ImageQuery, AttentionDirection::TextQuery] {
                let cfg = PffConfig { stages, direction, ..cfg };
                let out = pff_layer_forward(&f_i, &prompts, &params, &cfg, None).unwrap();
                assert_eq!(out.data(), f_i.data(), "{stages:?} {direction:?}");
            }
        }
    }

    #[test]
    fn width_mismatch_needs_adapter() {
        let cfg = PffConfig { tokens: 2, heads: 2, ..Default::default() };
        let mut rng = RngState::new(5);
        let params = PffParams::new(&cfg, 6, 8, &mut rng).unwrap();
        let t = table(3, 6);
        let prompts = PromptInputs::from_selection(&selection(&["c1"], &[0.3]), &t).unwrap();
        let f_i = Tensor::randn(&[5, 8], 1.0, &mut rng);
        assert!(matches!(
            pff_layer_forward(&f_i, &prompts, &params, &cfg, None),
            Err(PffError::Config(_))
        ));
        let adapter = WidthAdapter::new(6, 8, &mut rng);
        let out = pff_layer_forward(&f_i, &prompts, &params, &cfg, Some(&adapter)).unwrap();
        assert_eq!(out.shape(), &[5, 8]);
    }

    #[test]
    fn zero_tokens_rejected() {
        let cfg = PffConfig { tokens: 0, ..Default::default() };
        assert!(PffParams::new(&cfg, 8, 8, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn token_sweep_shapes() {
        let t = table(3, 8);
        let prompts = PromptInputs::from_selection(&selection(&["c0", "c2"], &[0.3, 0.1]), &t).unwrap();
        let f_i = Tensor::randn(&[6, 8], 1.0, &mut RngState::new(1));
        for m in [25, 50, 75, 100, 125, 150] {
            let cfg = PffConfig { tokens: m, heads: 2, ..Default::default() };
            let params = PffParams::new(&cfg, 8, 8, &mut RngState::new(m as u64)).unwrap();
            assert_eq!(params.token_count(), m);
            let out = pff_layer_forward(&f_i, &prompts, &params, &cfg, None).unwrap();
            assert_eq!(out.shape(), &[6, 8]);
        }
        assert_eq!(PffConfig::default().tokens, 75);
    }
}
