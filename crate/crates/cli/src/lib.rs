//! `infill` command: pipeline steps, the experiment server, analysis and
//! the synthetic-author simulator.

pub mod server;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use infill_core::analytics::{build_report, render_text, AuthoringBlock, JudgmentResponse, LmEmbedder, Report};
use infill_core::experiment::{
    export_blocks, EventStore, Experiment, ExperimentState, FileStore, LmStoryTeller, PromptPool, SystemClock,
};
use infill_core::generate::read_examples;
use infill_core::pipeline::{Layout, Pipeline, PipelineConfig, PipelineError, Step, StepOutcome};
use infill_core::simulate::{calibrate_post_shift, simulate, HashEmbedder};
use infill_core::{Checkpoint, LanguageModel, Vocabulary};
use thiserror::Error;
use tracing::info;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Failed(_) => 3,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Usage(e.to_string()),
            PipelineError::MissingInput { .. } | PipelineError::Data { .. } => CliError::Data(e.to_string()),
            PipelineError::Failed { .. } => CliError::Failed(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "infill", version, about = "Sentence infilling pipeline and authoring experiment")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory of plain-text story files
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Root for every artifact and step manifest
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Top-level seed; each step derives its own from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override any config value, e.g. `--set lm_training.max_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
}

#[derive(Debug, Args)]
pub struct StepArgs {
    /// Run even when the manifest is up to date.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment the corpus, build dataset splits and train the tokenizer.
    SynthData(StepArgs),
    /// Train the causal infilling model.
    TrainLm(StepArgs),
    /// Train the masked scoring model.
    TrainScorer(StepArgs),
    /// Filter, score and label prompts.
    SelectPrompts(StepArgs),
    /// Generate example sentences for labeled prompts.
    GenExamples(StepArgs),
    /// Run every pipeline step that is out of date.
    RunAll,
    /// Serve the experiment API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Event log; defaults to `<out_dir>/experiment/events.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Build the analytics report from the experiment log or exported files.
    Analyze {
        #[arg(long)]
        log: Option<PathBuf>,
        /// Exported blocks JSON (`GET /export/blocks` body); requires `--responses`.
        #[arg(long, requires = "responses")]
        blocks: Option<PathBuf>,
        #[arg(long, requires = "blocks")]
        responses: Option<PathBuf>,
        /// Embed with feature hashing instead of the trained model.
        #[arg(long)]
        hash_embedder: bool,
        #[arg(long)]
        resamples: Option<usize>,
        /// Write the report JSON here instead of `<out_dir>/report.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replay the experiment with synthetic authors and raters.
    Simulate {
        #[arg(long)]
        n_authors: Option<usize>,
        /// Additive POST preference shift on the latent scale.
        #[arg(long, conflicts_with = "target_gap")]
        post_shift: Option<f64>,
        /// Calibrate the shift so POST is preferred this much more often than PRE.
        #[arg(long)]
        target_gap: Option<f64>,
        #[arg(long)]
        influence: Option<f64>,
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Embed with the trained model instead of feature hashing.
        #[arg(long)]
        lm_embedder: bool,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a string.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("bad key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::Usage(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Read the config file (if any) and apply flag overrides.
pub fn load_config(global: &GlobalArgs) -> Result<PipelineConfig, CliError> {
    let mut table = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for s in &global.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        set_path(&mut table, k.trim(), parse_scalar(v.trim()))?;
    }
    let path_value = |p: &Path| toml::Value::String(p.to_string_lossy().into_owned());
    if let Some(p) = &global.corpus {
        table.insert("corpus".into(), path_value(p));
    }
    if let Some(p) = &global.out_dir {
        table.insert("out_dir".into(), path_value(p));
    }
    if let Some(s) = global.seed {
        let v = i64::try_from(s).map_err(|_| CliError::Usage("seed must fit in a signed 64-bit TOML integer".into()))?;
        table.insert("seed".into(), toml::Value::Integer(v));
    }
    let config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn print_outcomes(outcomes: &[StepOutcome]) {
    for o in outcomes {
        let status = if o.ran { "ran" } else { "skipped" };
        println!("{:<15} {status:<8} {}", o.step.name(), o.reason);
    }
}

fn data<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Data(format!("{what}: {e}"))
}

fn load_model(layout: &Layout, vocab: &Vocabulary) -> Result<LanguageModel, CliError> {
    let path = layout.lm();
    let ck = Checkpoint::load(&path).map_err(data(path.display()))?;
    ck.check_tokenizer(&vocab.hash()).map_err(data(path.display()))?;
    ck.model().map_err(data(path.display()))
}

fn load_vocab(layout: &Layout) -> Result<Vocabulary, CliError> {
    let path = layout.tokenizer();
    Vocabulary::load(&path).map_err(data(path.display()))
}

/// Experiment over the generated examples, replaying an existing log.
pub fn open_experiment(config: &PipelineConfig, log: &Path) -> Result<Experiment, CliError> {
    let layout = config.layout();
    let records = read_examples(&layout.examples()).map_err(data(layout.examples().display()))?;
    let pool = PromptPool::from_records(&records, config.experiment.seed).map_err(data("prompt pool"))?;
    if let Some(dir) = log.parent() {
        fs::create_dir_all(dir).map_err(data(dir.display()))?;
    }
    let store = FileStore::open(log).map_err(data(log.display()))?;
    let mut exp_config = config.experiment.clone();
    exp_config.constraints = config.generation.clone();
    Experiment::open(exp_config, pool, Box::new(store), Box::new(SystemClock)).map_err(data(log.display()))
}

fn write_report(report: &Report, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json + "\n").map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(data(path.display()))?;
    serde_json::from_str(&text).map_err(data(path.display()))
}

/// Blocks either in the exported `{blocks, dropped}` shape or as a bare list.
fn read_blocks(path: &Path) -> Result<Vec<AuthoringBlock>, CliError> {
    let value: serde_json::Value = read_json(path)?;
    let list = value.get("blocks").cloned().unwrap_or(value);
    serde_json::from_value(list).map_err(data(path.display()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(&cli.global)?;
    let step = |s: Step, force: bool| -> Result<(), CliError> {
        let pipeline = Pipeline::new(config.clone())?;
        print_outcomes(&[pipeline.run_step(s, force)?]);
        Ok(())
    };
    match cli.command {
        Command::SynthData(a) => step(Step::SynthData, a.force),
        Command::TrainLm(a) => step(Step::TrainLm, a.force),
        Command::TrainScorer(a) => step(Step::TrainScorer, a.force),
        Command::SelectPrompts(a) => step(Step::SelectPrompts, a.force),
        Command::GenExamples(a) => step(Step::GenExamples, a.force),
        Command::RunAll => {
            print_outcomes(&Pipeline::new(config)?.run_all()?);
            Ok(())
        }
        Command::Serve { port, host, log } => serve(&config, port.unwrap_or(config.port), &host, log),
        Command::Analyze { log, blocks, responses, hash_embedder, resamples, output } => {
            let layout = config.layout();
            let (blocks, responses): (Vec<AuthoringBlock>, Vec<JudgmentResponse>) = match (blocks, responses) {
                (Some(b), Some(r)) => (read_blocks(&b)?, read_json(&r)?),
                _ => {
                    let log = log.unwrap_or_else(|| layout.event_log());
                    if !log.is_file() {
                        return Err(CliError::Data(format!("event log {} not found", log.display())));
                    }
                    let events = FileStore::open(&log)
                        .and_then(|mut s| s.load())
                        .map_err(data(log.display()))?;
                    let state = ExperimentState::replay(&events, &config.generation).map_err(data(log.display()))?;
                    let responses = state.judgments.as_ref().map(|j| j.responses.clone()).unwrap_or_default();
                    (export_blocks(&state).blocks, responses)
                }
            };
            let mut report_cfg = config.report.clone();
            if let Some(n) = resamples {
                report_cfg.n_resamples = n;
            }
            let report = if hash_embedder {
                build_report(&blocks, &responses, &HashEmbedder::default(), &report_cfg)
            } else {
                let vocab = load_vocab(&layout)?;
                let model = load_model(&layout, &vocab)?;
                build_report(&blocks, &responses, &LmEmbedder { model: &model, vocab: &vocab }, &report_cfg)
            }
            .map_err(|e| CliError::Data(format!("analysis: {e}")))?;
            write_report(&report, &output.unwrap_or_else(|| layout.root.join("report.json")))?;
            print!("{}", render_text(&report));
            Ok(())
        }
        Command::Simulate { n_authors, post_shift, target_gap, influence, runs, lm_embedder, resamples, output } => {
            let mut sim = config.simulation.clone();
            if let Some(n) = n_authors {
                sim.n_authors = n;
            }
            if let Some(i) = influence {
                sim.model.influence_strength = i;
            }
            if let Some(s) = post_shift {
                sim.model.post_shift = s;
            }
            if let Some(g) = target_gap {
                sim.model.post_shift = calibrate_post_shift(&sim.model, g, config.seed)
                    .map_err(|e| CliError::Usage(format!("target gap: {e}")))?;
                info!(shift = sim.model.post_shift, "calibrated post shift");
            }
            if let Some(n) = resamples {
                sim.report.n_resamples = n;
            }
            let layout = config.layout();
            let lm = if lm_embedder {
                let vocab = load_vocab(&layout)?;
                Some((load_model(&layout, &vocab)?, vocab))
            } else {
                None
            };
            let mut reports = Vec::new();
            for r in 0..runs {
                let seed = config.seed.wrapping_add(r);
                let result = match &lm {
                    Some((model, vocab)) => simulate(&sim, &LmEmbedder { model, vocab }, seed),
                    None => simulate(&sim, &HashEmbedder::default(), seed),
                };
                let (_, report) = result.map_err(|e| CliError::Usage(format!("simulate: {e}")))?;
                if runs == 1 {
                    print!("{}", render_text(&report));
                } else {
                    let p = report.preferences.tests.iter().map(|t| match &t.result {
                        Some(r) => format!("{}: p={:.4}", t.comparison, r.p_value),
                        None => format!("{}: n/a", t.comparison),
                    });
                    println!("run {r:>3} seed {seed}: {}", p.collect::<Vec<_>>().join(" "));
                }
                reports.push(report);
            }
            let path = output.unwrap_or_else(|| layout.root.join("simulation.json"));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| CliError::Failed(e.to_string()))?;
            }
            let json = serde_json::to_string_pretty(&serde_json::json!({ "config": sim, "reports": reports }))
                .expect("reports serialize");
            fs::write(&path, json + "\n").map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
        }
    }
}

fn serve(config: &PipelineConfig, port: u16, host: &str, log: Option<PathBuf>) -> Result<(), CliError> {
    let layout = config.layout();
    let log = log.unwrap_or_else(|| layout.event_log());
    let experiment = open_experiment(config, &log)?;
    let vocab = Arc::new(load_vocab(&layout)?);
    let model = Arc::new(load_model(&layout, &vocab)?);
    let teller = Arc::new(LmStoryTeller::new(model, vocab));
    let app = server::router(server::AppState::new(experiment, teller));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(e.to_string()))?;
    runtime.block_on(async {
        let addr = format!("{host}:{port}");
        let listener =
            tokio::net::TcpListener::bind(&addr).await.map_err(|e| CliError::Failed(format!("bind {addr}: {e}")))?;
        info!(%addr, log = %log.display(), "serving");
        axum::serve(listener, app).await.map_err(|e| CliError::Failed(e.to_string()))
    })
}
