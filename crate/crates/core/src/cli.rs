//! Batch command-line entry point.
//!
//! Exit codes are disjoint: see [`exit`]. Every subcommand is deterministic
//! given its configuration and seed, and only writes to the path named by
//! `--out`.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{self, ConfigError};
use crate::dcp::{select_prompts, DcpConfig, DcpError};
use crate::embedding::{
    load_fixture, manifest_path, normalize, read_image_embedding, write_fixture, write_image_embedding, CategoryLibrary, EmbeddingError,
    EmbeddingTable, LibrarySource,
};
use crate::gradcheck::{self, Scope};
use crate::harness::street::{street_image, STREET_SUPPLEMENT};
use crate::harness::{ablate, train, AblationAxis, AblationRow, Fixture, HarnessError, TrainConfig};
use crate::pff::PffError;
use crate::tensor::{OpKind, RngState, TensorError};

pub mod exit {
    pub const OK: i32 = 0;
    /// A file could not be read or written.
    pub const IO: i32 = 1;
    /// A fixture, image vector or checkpoint is malformed.
    pub const FORMAT: i32 = 2;
    /// No class passed the filter on any pass.
    pub const EMPTY_SELECTION: i32 = 3;
    /// Training aborted on a non-finite loss or parameter.
    pub const NON_FINITE: i32 = 4;
    /// At least one gradient check failed.
    pub const GRADCHECK_FAILED: i32 = 5;
    /// Bad flags, config keys or config values.
    pub const USAGE: i32 = 6;
    /// A broken internal contract.
    pub const INTERNAL: i32 = 7;
}

const SYNTHETIC_DIM: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "promptfocus", version, about = "Prompt selection and adapter training on a frozen toy backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select class prompts for one image embedding; prints JSON.
    Select(SelectArgs),
    /// Train one variant on the toy task; writes report.json, loss.csv, final.pffc.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Sweep one axis over several seeds; prints CSV.
    Ablate(AblateArgs),
    /// Write the built-in street fixture, its supplement list and a sample image.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Args)]
struct Layered {
    /// Flat JSON config file with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Layered {
    fn overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        o.extend(self.seed.map(|s| format!("seed={s}")));
        o
    }

    fn train_config(&self) -> Result<TrainConfig, Failure> {
        Ok(config::load(self.config.as_deref(), &self.overrides())?)
    }
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// `.embt` fixture; defaults to the built-in street fixture.
    #[arg(long, conflicts_with = "synthetic")]
    fixture: Option<PathBuf>,
    /// `.vec` image embedding; defaults to the built-in street image.
    #[arg(long, conflicts_with = "synthetic")]
    image: Option<PathBuf>,
    /// Use a random fixture of `--classes` classes and an image near the first.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 8, requires = "synthetic")]
    classes: usize,
    /// Selection settings file (flat JSON, keys as in `DcpConfig`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for `--synthetic`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    layered: Layered,
    /// `.embt` fixture; must contain every toy class. Defaults to the street fixture.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all", value_parser = ["tensor_core", "pff", "all"])]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the backward rule of one op (negative control).
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    layered: Layered,
    #[arg(long, value_parser = ["token_length", "tau_f", "tau_c", "max_classes", "component"])]
    axis: String,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    values: Vec<String>,
    #[arg(long)]
    fixture: Option<PathBuf>,
    /// Directory for ablation.csv and ablation.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FixturesArgs {
    #[arg(long)]
    out: PathBuf,
}

/// An error on its way to stderr, with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::NonFinite { .. } => exit::NON_FINITE,
        TensorError::Config(_) => exit::USAGE,
        _ => exit::INTERNAL,
    }
}

fn embedding_code(e: &EmbeddingError) -> i32 {
    match e {
        EmbeddingError::Io { .. } => exit::IO,
        EmbeddingError::Format { .. } | EmbeddingError::Manifest(_) | EmbeddingError::Data(_) => exit::FORMAT,
        EmbeddingError::Contract(_) => exit::INTERNAL,
    }
}

fn dcp_code(e: &DcpError) -> i32 {
    match e {
        DcpError::Config(_) => exit::USAGE,
        DcpError::EmptySelection(_) => exit::EMPTY_SELECTION,
        DcpError::Embedding(e) => embedding_code(e),
    }
}

fn pff_code(e: &PffError) -> i32 {
    match e {
        PffError::Tensor(e) => tensor_code(e),
        PffError::Embedding(e) => embedding_code(e),
        PffError::Config(_) => exit::USAGE,
        PffError::Contract(_) => exit::INTERNAL,
        PffError::Checkpoint { .. } => exit::FORMAT,
        PffError::Io { .. } => exit::IO,
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Tensor(t) => tensor_code(t),
            HarnessError::Embedding(x) => embedding_code(x),
            HarnessError::Dcp(x) => dcp_code(x),
            HarnessError::Pff(x) => pff_code(x),
            HarnessError::Config(_) => exit::USAGE,
            HarnessError::Contract(_) | HarnessError::State(_) => exit::INTERNAL,
            HarnessError::NonFinite { .. } => exit::NON_FINITE,
            HarnessError::Io { .. } => exit::IO,
        };
        Failure::new(code, e)
    }
}

impl From<DcpError> for Failure {
    fn from(e: DcpError) -> Self {
        Failure::new(dcp_code(&e), e)
    }
}

impl From<EmbeddingError> for Failure {
    fn from(e: EmbeddingError) -> Self {
        Failure::new(embedding_code(&e), e)
    }
}

impl From<PffError> for Failure {
    fn from(e: PffError) -> Self {
        Failure::new(pff_code(&e), e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(exit::USAGE, e)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::new(exit::IO, format!("i/o error on {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::new(exit::IO, format!("i/o error on {}: {e}", path.display())))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::new(exit::IO, format!("cannot write output: {e}")))
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("output serialises") + "\n"
}

fn load_fixture_or_street(path: Option<&Path>) -> Result<Fixture, Failure> {
    Ok(match path {
        None => Fixture::street(),
        Some(p) => {
            let (library, table) = load_fixture(p)?;
            Fixture { library, table }
        }
    })
}

/// A random `classes`-row table and an image embedding close to its first row.
fn synthetic(classes: usize, seed: u64) -> Result<(Fixture, Vec<f64>), Failure> {
    if classes == 0 {
        return Err(Failure::new(exit::USAGE, "--classes must be at least 1"));
    }
    let mut rng = RngState::new(seed);
    let names: Vec<String> = (0..classes).map(|i| format!("class_{i}")).collect();
    let rows = rng.normal_vec(classes * SYNTHETIC_DIM, 1.0);
    let table = EmbeddingTable::from_unnormalized(names.clone(), SYNTHETIC_DIM, rows)?;
    let library = CategoryLibrary::new(names, LibrarySource::Initial)?;
    let noise = rng.normal_vec(SYNTHETIC_DIM, 0.05);
    let mut image: Vec<f64> = table.row(0).iter().zip(noise).map(|(r, n)| r + n).collect();
    normalize(&mut image);
    Ok((Fixture { library, table }, image))
}

fn cmd_select(a: &SelectArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let (fixture, image) = if a.synthetic {
        synthetic(a.classes, a.seed)?
    } else {
        let fixture = load_fixture_or_street(a.fixture.as_deref())?;
        let image = match &a.image {
            Some(p) => read_image_embedding(p)?,
            None => street_image(&fixture.table),
        };
        (fixture, image)
    };
    let file = a.config.as_deref().map(config::read_file).transpose()?;
    let cfg: DcpConfig = config::layer(&DcpConfig::default(), file.as_ref(), &a.overrides)?;
    let selection = select_prompts(&image, &fixture.library, &fixture.table, &cfg)?;
    let json = pretty(&selection);
    match &a.out {
        Some(p) => write_file(p, json),
        None => emit(stdout, &json),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    seed: u64,
    steps: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    knowledge_miou: f64,
    application_miou: f64,
    step0_equivalence: bool,
    backbone_frozen: bool,
    out: PathBuf,
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let cfg = a.layered.train_config()?;
    let fixture = load_fixture_or_street(a.fixture.as_deref())?;
    let outcome = train(&cfg, &fixture, Some(&a.out))?;
    let r = &outcome.report;
    let summary = TrainSummary {
        variant: r.variant.name().to_string(),
        seed: r.seed,
        steps: r.steps,
        initial_loss: r.initial_loss,
        final_loss: r.final_loss,
        knowledge_miou: r.final_metrics.knowledge.miou,
        application_miou: r.final_metrics.application.miou,
        step0_equivalence: r.step0_equivalence,
        backbone_frozen: r.backbone_frozen,
        out: a.out.clone(),
    };
    emit(stdout, &pretty(&summary))
}

fn cmd_gradcheck(a: &GradcheckArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let scope = Scope::from_name(&a.scope).expect("clap restricts the scope");
    let fault = match &a.fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::new(exit::USAGE, format!("unknown op {name:?}")))?),
    };
    let report = gradcheck::run(scope, a.seed, fault)?;
    emit(stdout, &pretty(&report))?;
    if report.passed {
        return Ok(());
    }
    for c in report.failures() {
        let _ = writeln!(stderr, "FAIL {} {} max_rel_err={:e}", c.group, c.parameter, c.max_rel_err);
    }
    let ops = report.failing_ops();
    let detail = if ops.is_empty() { String::new() } else { format!(" (ops: {})", ops.join(", ")) };
    Err(Failure::new(exit::GRADCHECK_FAILED, format!("gradient check failed{detail}")))
}

fn cmd_ablate(a: &AblateArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let values: Vec<String> = a.values.iter().map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::new(exit::USAGE, "--values needs at least one value"));
    }
    let axis: AblationAxis = serde_json::from_value(serde_json::Value::String(a.axis.clone()))
        .map_err(|e| Failure::new(exit::USAGE, e))?;
    let cfg = a.layered.train_config()?;
    let fixture = load_fixture_or_street(a.fixture.as_deref())?;
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|i| cfg.seed + i).collect();
    let rows = ablate(&cfg, &fixture, axis, &values, &seeds)?;
    let csv = AblationRow::csv(&rows);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("ablation.csv"), &csv)?;
        write_file(&dir.join("ablation.json"), pretty(&rows))?;
    }
    emit(stdout, &csv)
}

fn cmd_fixtures(a: &FixturesArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    create_dir(&a.out)?;
    let fixture = Fixture::street();
    let embt = a.out.join("street.embt");
    write_fixture(&embt, &fixture.library, &fixture.table)?;
    let supplement = a.out.join("street_supplement.txt");
    write_file(&supplement, STREET_SUPPLEMENT)?;
    let image = a.out.join("img0.vec");
    write_image_embedding(&image, &street_image(&fixture.table))?;
    for p in [&embt, &manifest_path(&embt), &supplement, &image] {
        emit(stdout, &format!("{}\n", p.display()))?;
    }
    Ok(())
}

/// Parses `args` (including the program name), runs one subcommand and
/// returns its exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                exit::USAGE
            } else {
                let _ = stdout.write_all(text.as_bytes());
                exit::OK
            };
        }
    };
    let result = match &cli.command {
        Command::Select(a) => cmd_select(a, stdout),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, stdout, stderr),
        Command::Ablate(a) => cmd_ablate(a, stdout),
        Command::Fixtures(a) => cmd_fixtures(a, stdout),
    };
    match result {
        Ok(()) => exit::OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}
