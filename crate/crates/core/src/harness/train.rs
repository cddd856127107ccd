//! Training loop, evaluation and ablation sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{Confusion, MetricsReport};
use super::model::{Model, ModelConfig, Variant};
use super::optim::{adamw_step, AdamState, AdamWConfig};
use super::scene::{SceneConfig, Style, ToyScene, ToyWorld};
use super::street::{street_library, street_table};
use super::{HarnessError, Result};
use crate::dcp::{select_prompts, DcpConfig, PromptSelection};
use crate::embedding::{CategoryLibrary, EmbeddingTable};
use crate::pff::{write_checkpoint, PffConfig, PromptInputs};
use crate::tensor::nn::Params;
use crate::tensor::{RngState, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub scene: SceneConfig,
    pub knowledge: Style,
    pub application: Style,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            knowledge: Style { rotation: 0.0, noise: 1.0 },
            application: Style { rotation: 0.8, noise: 1.2 },
            train_scenes: 2048,
            eval_scenes: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Write `step_<k>.pffc` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Seeds per value in ablation sweeps (`seed`, `seed + 1`, …).
    pub ablation_seeds: usize,
    pub variant: Variant,
    pub optim: AdamWConfig,
    pub dcp: DcpConfig,
    pub pff: PffConfig,
    pub model: ModelConfig,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 200,
            batch_size: 8,
            eval_every: 0,
            checkpoint_every: 0,
            ablation_seeds: 5,
            variant: Variant::Full,
            optim: AdamWConfig::default(),
            dcp: DcpConfig {
                temperature: 0.07,
                ..DcpConfig::default()
            },
            pff: PffConfig {
                self_residual: true,
                query_residual: true,
                ..PffConfig::default()
            },
            model: ModelConfig::default(),
            task: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.dcp.validate()?;
        self.task.scene.validate()?;
        self.task.knowledge.validate()?;
        self.task.application.validate()?;
        if self.batch_size == 0 || self.task.train_scenes == 0 || self.task.eval_scenes == 0 {
            return Err(HarnessError::Config(
                "batch_size, task.train_scenes and task.eval_scenes must be positive".into(),
            ));
        }
        if self.pff.tokens == 0 {
            return Err(HarnessError::Config("pff.tokens must be at least 1".into()));
        }
        if self.pff.heads == 0 || !self.model.width.is_multiple_of(self.pff.heads) {
            return Err(HarnessError::Config(format!(
                "model.width {} is not divisible by pff.heads {}",
                self.model.width, self.pff.heads
            )));
        }
        Ok(())
    }
}

/// Category library plus its embedding table.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub library: CategoryLibrary,
    pub table: EmbeddingTable,
}

impl Fixture {
    /// The built-in 20-class street fixture.
    pub fn street() -> Self {
        Self {
            library: street_library(),
            table: street_table(),
        }
    }
}

/// A scene with its cached prompt selection.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: ToyScene,
    pub selection: PromptSelection,
    pub prompts: PromptInputs,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: ToyWorld,
    pub train: Vec<Sample>,
    pub knowledge_eval: Vec<Sample>,
    pub application_eval: Vec<Sample>,
}

const WORLD_STREAM: u64 = 10;
const TRAIN_STREAM: u64 = 11;
const HOLDOUT_STREAM: u64 = 12;
const APPLICATION_STREAM: u64 = 13;
const BATCH_STREAM: u64 = 20;

impl Dataset {
    /// Draws every scene and runs prompt selection once per scene.
    pub fn build(cfg: &TrainConfig, fixture: &Fixture) -> Result<Self> {
        let root = RngState::new(cfg.seed);
        let world = ToyWorld::new(cfg.task.scene, &fixture.table, &mut root.derive(WORLD_STREAM))?;
        let make = |style: &Style, n: usize, stream: u64| -> Result<Vec<Sample>> {
            world
                .generate_set(style, n, &root.derive(stream))?
                .into_iter()
                .map(|scene| {
                    let selection = select_prompts(&scene.image_embedding, &fixture.library, &fixture.table, &cfg.dcp)?;
                    let prompts = PromptInputs::from_selection(&selection, &fixture.table)?;
                    Ok(Sample {
                        scene,
                        selection,
                        prompts,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: make(&cfg.task.knowledge, cfg.task.train_scenes, TRAIN_STREAM)?,
            knowledge_eval: make(&cfg.task.knowledge, cfg.task.eval_scenes, HOLDOUT_STREAM)?,
            application_eval: make(&cfg.task.application, cfg.task.eval_scenes, APPLICATION_STREAM)?,
            world,
        })
    }
}

/// Per-class IoU and mIoU of `model` on `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], names: &[String]) -> Result<MetricsReport> {
    if model.classes() != names.len() {
        return Err(HarnessError::Contract(format!(
            "model predicts {} classes, ontology has {}",
            model.classes(),
            names.len()
        )));
    }
    let mut conf = Confusion::new(names.len());
    for s in samples {
        let pred = model.predict(&s.scene.features, &s.prompts)?;
        conf.add(&s.scene.labels, &pred)?;
    }
    Ok(conf.report(names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStat {
    pub count: usize,
    pub iterations: usize,
    pub final_tau_f: f64,
    pub final_tau_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSummary {
    pub max_classes: usize,
    pub max_count: usize,
    pub mean_count: f64,
    pub train: Vec<PromptStat>,
    pub knowledge_eval: Vec<PromptStat>,
    pub application_eval: Vec<PromptStat>,
}

impl PromptSummary {
    fn new(data: &Dataset, max_classes: usize) -> Self {
        let stats = |s: &[Sample]| -> Vec<PromptStat> {
            s.iter()
                .map(|x| PromptStat {
                    count: x.selection.len(),
                    iterations: x.selection.iterations_used,
                    final_tau_f: x.selection.final_tau_f,
                    final_tau_c: x.selection.final_tau_c,
                })
                .collect()
        };
        let (train, knowledge_eval, application_eval) =
            (stats(&data.train), stats(&data.knowledge_eval), stats(&data.application_eval));
        let all: Vec<usize> = train
            .iter()
            .chain(&knowledge_eval)
            .chain(&application_eval)
            .map(|p| p.count)
            .collect();
        Self {
            max_classes,
            max_count: all.iter().copied().max().unwrap_or(0),
            mean_count: all.iter().sum::<usize>() as f64 / all.len().max(1) as f64,
            train,
            knowledge_eval,
            application_eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub knowledge: MetricsReport,
    pub application: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub config: TrainConfig,
    pub trainable_tensors: usize,
    pub trainable_values: usize,
    pub backbone_hash_start: String,
    pub backbone_hash_end: String,
    pub backbone_frozen: bool,
    /// Application-set logits at step 0 equal the frozen baseline's bitwise.
    pub step0_equivalence: bool,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub prompts: PromptSummary,
    pub evals: Vec<EvalPoint>,
    #[serde(rename = "final")]
    pub final_metrics: EvalPoint,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    /// `(step, loss, lr)` per optimiser step.
    pub losses: Vec<(usize, f64, f64)>,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for (step, loss, lr) in &self.losses {
            let _ = writeln!(s, "{step},{loss},{lr}");
        }
        s
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn save_params(model: &Model, path: &Path) -> Result<()> {
    Ok(write_checkpoint(path, &model.trainable_parameters())?)
}

/// Trains the adapter blocks and head on the knowledge set.
///
/// With `out_dir` set, writes `report.json`, `loss.csv` and `final.pffc`
/// there (plus `last_good.pffc` if the loss turns non-finite).
pub fn train(cfg: &TrainConfig, fixture: &Fixture, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let data = Dataset::build(cfg, fixture)?;
    let names = data.world.names.clone();
    let d = fixture.table.dim();
    let mut model = Model::new(cfg.variant, &cfg.pff, &cfg.model, d, names.len(), cfg.seed)?;
    let hash_start = model.backbone.weights_hash();

    let baseline = Model::new(Variant::Baseline, &cfg.pff, &cfg.model, d, names.len(), cfg.seed)?;
    let mut step0_equivalence = true;
    for s in &data.application_eval {
        let a = model.logits(&s.scene.features, &s.prompts)?;
        let b = baseline.logits(&s.scene.features, &s.prompts)?;
        step0_equivalence &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    drop(baseline);

    let trainable = model.trainable_parameters();
    let (trainable_tensors, trainable_values) = (trainable.len(), trainable.iter().map(|(_, t)| t.numel()).sum());
    let mut state = AdamState::for_params(&model.params_mut());
    let mut batch_rng = RngState::new(cfg.seed).derive(BATCH_STREAM);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();

    for step in 1..=cfg.steps {
        let mut r = batch_rng.stream();
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| r.random_range(0..data.train.len())).collect();
        let snapshot = model.clone();
        let loss = match step_loss(&mut model, &data.train, &batch) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(HarnessError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(abort(&snapshot, step, out_dir));
            }
            Err(e) => return Err(e),
        };
        adamw_step(&mut model.params_mut(), &mut state, &cfg.optim)?;
        if model.params_mut().iter().any(|p| !p.is_finite()) {
            return Err(abort(&snapshot, step, out_dir));
        }
        losses.push((step, loss, cfg.optim.lr));
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
            evals.push(eval_point(&model, &data, &names, step)?);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                save_params(&model, &dir.join(format!("step_{step}.pffc")))?;
            }
        }
    }

    let final_metrics = eval_point(&model, &data, &names, cfg.steps)?;
    evals.push(final_metrics.clone());
    let hash_end = model.backbone.weights_hash();
    if hash_end != hash_start {
        return Err(HarnessError::State("backbone weights changed during training".into()));
    }
    let report = TrainReport {
        variant: cfg.variant,
        seed: cfg.seed,
        steps: cfg.steps,
        config: *cfg,
        trainable_tensors,
        trainable_values,
        backbone_frozen: hash_end == hash_start,
        backbone_hash_start: hash_start,
        backbone_hash_end: hash_end,
        step0_equivalence,
        initial_loss: losses.first().map(|l| l.1),
        final_loss: losses.last().map(|l| l.1),
        prompts: PromptSummary::new(&data, cfg.dcp.max_classes),
        evals,
        final_metrics,
    };
    let outcome = TrainOutcome { report, model, losses };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&outcome.report).expect("report serialises");
        let path = dir.join("report.json");
        fs::write(&path, json + "\n").map_err(io_err(&path))?;
        let path = dir.join("loss.csv");
        fs::write(&path, outcome.loss_csv()).map_err(io_err(&path))?;
        save_params(&outcome.model, &dir.join("final.pffc"))?;
    }
    Ok(outcome)
}

/// Forward + backward on one batch; leaves fresh gradients on every parameter.
fn step_loss(model: &mut Model, pool: &[Sample], batch: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let mut total = None;
    for &i in batch {
        let s = &pool[i];
        let logits = model.forward(&mut tape, &vars, &s.scene.features, &s.prompts)?;
        let ce = tape.cross_entropy(logits, &s.scene.labels)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| HarnessError::Config("empty batch".into()))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    tape.backward(loss)?;
    for (v, p) in vars.params.iter().zip(model.params_mut()) {
        p.zero_grad();
        tape.accumulate_grad(*v, p)?;
    }
    Ok(tape.value(loss)[0])
}

fn abort(last_good: &Model, step: usize, out_dir: Option<&Path>) -> HarnessError {
    let checkpoint: Option<PathBuf> = out_dir.map(|d| d.join("last_good.pffc"));
    if let Some(path) = &checkpoint {
        if let Err(e) = save_params(last_good, path) {
            return e;
        }
    }
    HarnessError::NonFinite { step, checkpoint }
}

fn eval_point(model: &Model, data: &Dataset, names: &[String], step: usize) -> Result<EvalPoint> {
    Ok(EvalPoint {
        step,
        knowledge: evaluate(model, &data.knowledge_eval, names)?,
        application: evaluate(model, &data.application_eval, names)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TokenLength,
    TauF,
    TauC,
    MaxClasses,
    Component,
}

impl AblationAxis {
    /// Applies one sweep value to a copy of `base`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut cfg = *base;
        let bad = || HarnessError::Config(format!("invalid value {value:?} for axis {self:?}"));
        let num = || value.trim().parse::<f64>().map_err(|_| bad());
        let count = || value.trim().parse::<usize>().map_err(|_| bad());
        match self {
            AblationAxis::TokenLength => cfg.pff.tokens = count()?,
            AblationAxis::MaxClasses => cfg.dcp.max_classes = count()?,
            AblationAxis::TauF => {
                cfg.dcp.tau_f_min = num()?;
                cfg.dcp.tau_f_max = cfg.dcp.tau_f_max.max(cfg.dcp.tau_f_min);
            }
            AblationAxis::TauC => {
                cfg.dcp.tau_c_min = num()?;
                cfg.dcp.tau_c_max = cfg.dcp.tau_c_max.max(cfg.dcp.tau_c_min);
            }
            AblationAxis::Component => cfg.variant = Variant::from_name(value.trim()).ok_or_else(bad)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    /// Application-set mIoU per seed.
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
}

impl AblationRow {
    pub fn csv(rows: &[AblationRow]) -> String {
        let mut s = String::from("value,mean,std\n");
        for r in rows {
            let _ = writeln!(s, "{},{},{}", r.value, r.mean, r.std);
        }
        s
    }
}

/// Trains one run per (value, seed) and reports application-set mIoU.
pub fn ablate(
    base: &TrainConfig,
    fixture: &Fixture,
    axis: AblationAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one value and one seed".into()));
    }
    let configs: Vec<TrainConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (value, cfg) in values.iter().zip(configs) {
        let mut runs = Vec::new();
        for &seed in seeds {
            let out = train(&TrainConfig { seed, ..cfg }, fixture, None)?;
            runs.push(out.report.final_metrics.application.miou);
        }
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = if runs.len() < 2 {
            0.0
        } else {
            (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        rows.push(AblationRow {
            value: value.trim().to_string(),
            runs,
            mean,
            std,
        });
    }
    Ok(rows)
}
