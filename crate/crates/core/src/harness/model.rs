//! Backbone + one PFF block per layer + linear per-patch head.

use serde::{Deserialize, Serialize};

use super::backbone::MockBackbone;
use super::{HarnessError, Result};
use crate::pff::{PffConfig, PffParams, PffVars, PromptInputs, Stages};
use crate::tensor::nn::{Binder, Linear, LinearVars, Params};
use crate::tensor::{RngState, Tape, Tensor, Var};

/// Which parts of the adapter are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    SelfOnly,
    CrossOnly,
    /// Full blocks fed a single uniform dummy prompt instead of the selection.
    NoPrompts,
    /// No blocks; only the head trains.
    Baseline,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SelfOnly,
        Variant::CrossOnly,
        Variant::NoPrompts,
        Variant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SelfOnly => "self_only",
            Variant::CrossOnly => "cross_only",
            Variant::NoPrompts => "no_prompts",
            Variant::Baseline => "baseline",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn stages(self) -> Stages {
        match self {
            Variant::SelfOnly => Stages::SelfOnly,
            Variant::CrossOnly => Stages::CrossOnly,
            _ => Stages::Full,
        }
    }

    pub fn uses_prompts(self) -> bool {
        !matches!(self, Variant::NoPrompts | Variant::Baseline)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone width `c`.
    pub width: usize,
    /// Backbone depth `N`.
    pub layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 64, layers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: Variant,
    pub pff: PffConfig,
    pub backbone: MockBackbone,
    pub blocks: Vec<PffParams>,
    pub head: Linear,
}

/// Tape handles for the trainable part of a [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub blocks: Vec<PffVars>,
    pub head: LinearVars,
    /// Trainable leaves in [`Params`] order.
    pub params: Vec<Var>,
}

const BACKBONE_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;
const BLOCK_STREAM: u64 = 100;

impl Model {
    /// Backbone and head depend only on `seed`, so every variant built from
    /// the same seed shares them bit for bit.
    pub fn new(
        variant: Variant,
        pff: &PffConfig,
        model: &ModelConfig,
        prompt_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if model.width == 0 || model.layers == 0 || classes == 0 {
            return Err(HarnessError::Config("model width, depth and class count must be positive".into()));
        }
        let root = RngState::new(seed);
        let backbone = MockBackbone::new(prompt_dim, model.width, model.layers, &mut root.derive(BACKBONE_STREAM));
        let head = Linear::new(model.width, classes, &mut root.derive(HEAD_STREAM));
        let pff = PffConfig {
            stages: variant.stages(),
            ..*pff
        };
        let blocks = if variant == Variant::Baseline {
            Vec::new()
        } else {
            (0..model.layers)
                .map(|i| PffParams::new(&pff, prompt_dim, model.width, &mut root.derive(BLOCK_STREAM + i as u64)))
                .collect::<std::result::Result<_, _>>()?
        };
        Ok(Self {
            variant,
            pff,
            backbone,
            blocks,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.head.d_out()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        let mut b = Binder::new(tape);
        let blocks = self.blocks.iter().map(|p| p.bind(&mut b)).collect();
        let head = self.head.bind(&mut b);
        ModelVars {
            blocks,
            head,
            params: b.into_vars(),
        }
    }

    /// The prompt inputs this variant actually consumes.
    pub fn prompt_inputs(&self, selected: &PromptInputs) -> Result<PromptInputs> {
        if self.variant.uses_prompts() {
            return Ok(selected.clone());
        }
        let d = selected.f_cls.cols();
        Ok(PromptInputs {
            f_cls: Tensor::new(&[1, d], vec![1.0 / (d as f64).sqrt(); d])?,
            p_sim: Tensor::new(&[1], vec![1.0])?,
        })
    }

    /// Per-patch logits (P×classes) for one scene.
    pub fn forward(&self, tape: &mut Tape, vars: &ModelVars, cells: &Tensor, prompts: &PromptInputs) -> Result<Var> {
        let bb = self.backbone.bind(tape);
        let x0 = tape.constant(cells);
        let mut x = bb.patchify(tape, x0)?;
        let prompt_vars = if self.blocks.is_empty() {
            None
        } else {
            let p = self.prompt_inputs(prompts)?;
            Some((tape.constant(&p.f_cls), tape.constant(&p.p_sim)))
        };
        for i in 0..self.backbone.depth() {
            x = bb.layer(tape, i, x)?;
            if let (Some(block), Some((f_cls, p_sim))) = (vars.blocks.get(i), prompt_vars) {
                x = block
                    .forward(tape, &self.pff, x, f_cls, p_sim, Some(bb.patchifier))?
                    .output;
            }
        }
        vars.head.forward(tape, x).map_err(Into::into)
    }

    /// Logits on a fresh tape, no gradients.
    pub fn logits(&self, cells: &Tensor, prompts: &PromptInputs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, cells, prompts)?;
        Ok(tape.tensor(out))
    }

    pub fn predict(&self, cells: &Tensor, prompts: &PromptInputs) -> Result<Vec<usize>> {
        let logits = self.logits(cells, prompts)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Frozen weights are excluded from [`Params`]; this is everything the
    /// optimiser may touch.
    pub fn trainable_parameters(&self) -> Vec<(String, &Tensor)> {
        self.named_params("")
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Params for Model {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        let p = |s: String| if prefix.is_empty() { s } else { format!("{prefix}.{s}") };
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&p(format!("layer{i}")), out);
        }
        self.head.visit(&p("head".into()), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for b in &mut self.blocks {
            b.visit_mut(out);
        }
        self.head.visit_mut(out);
    }
}
