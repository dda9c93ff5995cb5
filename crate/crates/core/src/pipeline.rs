//! Artifact pipeline: dataset, tokenizer, both models, prompt pool and
//! generated examples, each step guarded by a manifest under
//! `<out_dir>/manifests/`.
//!
//! A step reruns when its manifest is missing, its recorded config differs
//! from the current one, an input's hash changed, or an output is missing or
//! was modified. Within [`Pipeline::run_all`] it also reruns after any of its
//! dependencies ran. Otherwise it is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::analytics::ReportConfig;
use crate::corpus::{self, CorpusError, DatasetConfig, DatasetSplits, InfillPair};
use crate::experiment::ExperimentConfig;
use crate::generate::{self, Blocklist, GenerateError, GenerationConstraints};
use crate::lm::{self, Checkpoint, LmError, Mode, ModelConfig, TrainConfig, TrainReport};
use crate::prompts::{self, CorpusStats, Difficulty, PromptError, SelectionConfig};
use crate::seed;
use crate::simulate::SimulationConfig;
use crate::tokenizer::{TokenizerError, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    SynthData,
    TrainLm,
    TrainScorer,
    SelectPrompts,
    GenExamples,
}

pub const STEPS: [Step; 5] = [Step::SynthData, Step::TrainLm, Step::TrainScorer, Step::SelectPrompts, Step::GenExamples];

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::SynthData => "synth-data",
            Step::TrainLm => "train-lm",
            Step::TrainScorer => "train-scorer",
            Step::SelectPrompts => "select-prompts",
            Step::GenExamples => "gen-examples",
        }
    }

    /// Steps whose outputs this step reads.
    pub fn dependencies(self) -> &'static [Step] {
        match self {
            Step::SynthData => &[],
            Step::TrainLm | Step::TrainScorer => &[Step::SynthData],
            Step::SelectPrompts => &[Step::SynthData, Step::TrainScorer],
            Step::GenExamples => &[Step::SynthData, Step::TrainLm, Step::SelectPrompts],
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Step {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        STEPS.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown step {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{step}: missing input {}", path.display())]
    MissingInput { step: Step, path: PathBuf },
    #[error("{step}: data error: {message}")]
    Data { step: Step, message: String },
    #[error("{step} failed: {message} (manifest: {manifest})")]
    Failed { step: Step, message: String, manifest: String },
}

impl PipelineError {
    pub fn step(&self) -> Option<Step> {
        match self {
            PipelineError::Config(_) => None,
            PipelineError::MissingInput { step, .. }
            | PipelineError::Data { step, .. }
            | PipelineError::Failed { step, .. } => Some(*step),
        }
    }
}

/// Transformer dimensions; vocabulary size and mode are filled in by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(Mode::Causal, 0);
        Self { n_layers: d.n_layers, n_heads: d.n_heads, d_model: d.d_model, d_ff: d.d_ff, max_seq_len: d.max_seq_len }
    }
}

impl ModelShape {
    pub fn config(&self, mode: Mode, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            mode,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            vocab_size,
            seed,
        }
    }
}

/// Training defaults sized for the desk corpus on one CPU core.
pub fn desk_lm_training() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        grad_accum_steps: 1,
        max_steps: Some(1_500),
        ..TrainConfig::default()
    }
}

pub fn desk_scorer_training() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        grad_accum_steps: 1,
        max_steps: Some(1_000),
        ..TrainConfig::default()
    }
}

/// Everything the pipeline, server and analysis commands read.
///
/// Seeds inside `dataset`, the model shapes and the train configs are not
/// used directly: every step derives its own from `seed` and records it in
/// its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub vocab_size: usize,
    pub dataset: DatasetConfig,
    pub causal_model: ModelShape,
    pub masked_model: ModelShape,
    pub lm_training: TrainConfig,
    pub scorer_training: TrainConfig,
    pub selection: SelectionConfig,
    pub generation: GenerationConstraints,
    /// One phrase per line; the built-in list when absent.
    pub blocklist: Option<PathBuf>,
    pub experiment: ExperimentConfig,
    pub report: ReportConfig,
    pub simulation: SimulationConfig,
    pub port: u16,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            vocab_size: 4096,
            dataset: DatasetConfig { pairs_per_sentence: 5, ..DatasetConfig::default() },
            causal_model: ModelShape::default(),
            masked_model: ModelShape::default(),
            lm_training: desk_lm_training(),
            scorer_training: desk_scorer_training(),
            selection: SelectionConfig::default(),
            generation: GenerationConstraints::default(),
            blocklist: None,
            experiment: ExperimentConfig::default(),
            report: ReportConfig::default(),
            simulation: SimulationConfig::default(),
            port: 8080,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |e: String| Err(PipelineError::Config(e));
        if let Err(e) = self.lm_training.validate() {
            return bad(format!("lm_training: {e}"));
        }
        if let Err(e) = self.scorer_training.validate() {
            return bad(format!("scorer_training: {e}"));
        }
        if let Err(e) = self.selection.validate() {
            return bad(format!("selection: {e}"));
        }
        if let Err(e) = self.generation.validate() {
            return bad(format!("generation: {e}"));
        }
        if self.dataset.pairs_per_sentence == 0 {
            return bad("dataset.pairs_per_sentence must be positive".into());
        }
        for (name, shape, mode) in
            [("causal_model", &self.causal_model, Mode::Causal), ("masked_model", &self.masked_model, Mode::Masked)]
        {
            if let Err(e) = shape.config(mode, self.vocab_size, 0).validate() {
                return bad(format!("{name}: {e}"));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out_dir)
    }

    /// Config slice a step depends on, as recorded in its manifest.
    fn step_config(&self, step: Step) -> serde_json::Value {
        let v = match step {
            Step::SynthData => serde_json::json!({ "dataset": self.dataset, "vocab_size": self.vocab_size }),
            Step::TrainLm => serde_json::json!({ "model": self.causal_model, "training": self.lm_training }),
            Step::TrainScorer => serde_json::json!({ "model": self.masked_model, "training": self.scorer_training }),
            Step::SelectPrompts => serde_json::json!({ "selection": self.selection }),
            Step::GenExamples => serde_json::json!({ "generation": self.generation }),
        };
        v
    }

    pub fn step_seed(&self, step: Step) -> u64 {
        seed::derive(self.seed, step.name())
    }

    pub fn load_blocklist(&self) -> Result<Blocklist, GenerateError> {
        match &self.blocklist {
            Some(p) => Blocklist::load(p),
            None => Ok(Blocklist::builtin()),
        }
    }
}

/// Artifact paths under the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.root.join("tokenizer.bpe")
    }
    pub fn lm(&self) -> PathBuf {
        self.root.join("models/lm.ckpt")
    }
    pub fn lm_report(&self) -> PathBuf {
        self.root.join("models/lm.train.json")
    }
    pub fn scorer(&self) -> PathBuf {
        self.root.join("models/scorer.ckpt")
    }
    pub fn scorer_report(&self) -> PathBuf {
        self.root.join("models/scorer.train.json")
    }
    pub fn prompts(&self) -> PathBuf {
        self.root.join("prompts/prompts.jsonl")
    }
    pub fn filter_report(&self) -> PathBuf {
        self.root.join("prompts/filter.json")
    }
    pub fn examples(&self) -> PathBuf {
        self.root.join("examples/examples.jsonl")
    }
    pub fn failures(&self) -> PathBuf {
        self.root.join("examples/failures.jsonl")
    }
    pub fn event_log(&self) -> PathBuf {
        self.root.join("experiment/events.jsonl")
    }
    pub fn manifest(&self, step: Step) -> PathBuf {
        self.root.join("manifests").join(format!("{step}.json"))
    }

    fn split(&self, name: &str) -> PathBuf {
        self.data_dir().join(format!("{name}.jsonl"))
    }

    /// Files a step writes.
    pub fn outputs(&self, step: Step) -> Vec<PathBuf> {
        match step {
            Step::SynthData => {
                let mut v: Vec<PathBuf> = corpus::SPLIT_NAMES.iter().map(|n| self.split(n)).collect();
                v.push(self.data_dir().join("manifest.json"));
                v.push(self.tokenizer());
                v
            }
            Step::TrainLm => vec![self.lm(), self.lm_report()],
            Step::TrainScorer => vec![self.scorer(), self.scorer_report()],
            Step::SelectPrompts => vec![self.prompts(), self.filter_report()],
            Step::GenExamples => vec![self.examples(), self.failures()],
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub step: Step,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Path to hex SHA-256; corpus files are keyed `corpus/<name>`.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub summary: serde_json::Value,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: Step,
    pub ran: bool,
    /// Why the step ran, or `up to date`.
    pub reason: String,
}

fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(seed::sha256_hex(&fs::read(path)?))
}

fn data_err(step: Step) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Data { step, message }
}

/// Runs steps against one config and output directory.
pub struct Pipeline {
    config: PipelineConfig,
    layout: Layout,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let layout = config.layout();
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Input files of a step with their manifest keys.
    fn inputs(&self, step: Step) -> Result<Vec<(String, PathBuf)>, PipelineError> {
        let l = &self.layout;
        let tagged = |paths: Vec<PathBuf>| paths.into_iter().map(|p| (l.key(&p), p)).collect::<Vec<_>>();
        let data = || -> Vec<PathBuf> { corpus::SPLIT_NAMES.iter().map(|n| l.split(n)).collect() };
        let mut v = match step {
            Step::SynthData => {
                let dir = &self.config.corpus;
                if !dir.is_dir() {
                    return Err(PipelineError::MissingInput { step, path: dir.clone() });
                }
                let mut files: Vec<PathBuf> = fs::read_dir(dir)
                    .map_err(|e| PipelineError::Data { step, message: format!("{}: {e}", dir.display()) })?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                files
                    .into_iter()
                    .map(|p| (format!("corpus/{}", p.file_name().unwrap_or_default().to_string_lossy()), p))
                    .collect()
            }
            Step::TrainLm | Step::TrainScorer => {
                let mut paths = data();
                paths.push(l.tokenizer());
                tagged(paths)
            }
            Step::SelectPrompts => {
                let mut paths = data();
                paths.extend([l.tokenizer(), l.scorer()]);
                tagged(paths)
            }
            Step::GenExamples => tagged(vec![l.tokenizer(), l.lm(), l.prompts()]),
        };
        if step == Step::GenExamples {
            if let Some(p) = &self.config.blocklist {
                v.push(("blocklist".into(), p.clone()));
            }
        }
        Ok(v)
    }

    fn hash_inputs(&self, step: Step) -> Result<BTreeMap<String, String>, PipelineError> {
        let mut out = BTreeMap::new();
        for (key, path) in self.inputs(step)? {
            if !path.exists() {
                return Err(PipelineError::MissingInput { step, path });
            }
            let h = hash_file(&path).map_err(|e| PipelineError::Data { step, message: format!("{}: {e}", path.display()) })?;
            out.insert(key, h);
        }
        Ok(out)
    }

    pub fn read_manifest(&self, step: Step) -> Option<StepManifest> {
        let text = fs::read_to_string(self.layout.manifest(step)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Short description of a step's manifest for error messages.
    pub fn manifest_state(&self, step: Step) -> String {
        match self.read_manifest(step) {
            Some(_) => match self.staleness(step) {
                Ok(None) => "up to date".into(),
                Ok(Some(r)) => format!("stale: {r}"),
                Err(e) => format!("unreadable inputs: {e}"),
            },
            None if self.layout.manifest(step).exists() => "unparsable".into(),
            None => "absent".into(),
        }
    }

    /// `None` when the step is up to date, otherwise the reason to rerun.
    pub fn staleness(&self, step: Step) -> Result<Option<String>, PipelineError> {
        let Some(m) = self.read_manifest(step) else {
            return Ok(Some("no manifest".into()));
        };
        if m.config != self.config.step_config(step) || m.seed != self.config.step_seed(step) {
            return Ok(Some("config changed".into()));
        }
        let inputs = self.hash_inputs(step)?;
        if inputs != m.inputs {
            let changed: BTreeSet<&String> = inputs
                .iter()
                .filter(|(k, v)| m.inputs.get(*k) != Some(v))
                .map(|(k, _)| k)
                .chain(m.inputs.keys().filter(|k| !inputs.contains_key(*k)))
                .collect();
            let list: Vec<&str> = changed.into_iter().map(String::as_str).collect();
            return Ok(Some(format!("inputs changed: {}", list.join(", "))));
        }
        for path in self.layout.outputs(step) {
            let key = self.layout.key(&path);
            if !path.exists() {
                return Ok(Some(format!("output {key} missing")));
            }
            let h = hash_file(&path).map_err(|e| PipelineError::Data { step, message: e.to_string() })?;
            if m.outputs.get(&key) != Some(&h) {
                return Ok(Some(format!("output {key} modified")));
            }
        }
        Ok(None)
    }

    /// Run one step if stale (or always when `force`).
    pub fn run_step(&self, step: Step, force: bool) -> Result<StepOutcome, PipelineError> {
        let reason = match self.staleness(step)? {
            None if !force => {
                info!(%step, "up to date");
                return Ok(StepOutcome { step, ran: false, reason: "up to date".into() });
            }
            None => "forced".to_string(),
            Some(r) => r,
        };
        info!(%step, %reason, "running");
        let inputs = self.hash_inputs(step)?;
        let started = Instant::now();
        let summary = self.execute(step).map_err(|e| match e {
            PipelineError::Failed { step, message, .. } => {
                PipelineError::Failed { step, message, manifest: self.manifest_state(step) }
            }
            other => other,
        })?;
        let mut outputs = BTreeMap::new();
        for path in self.layout.outputs(step) {
            let h = hash_file(&path).map_err(|e| self.failed(step, format!("{}: {e}", path.display())))?;
            outputs.insert(self.layout.key(&path), h);
        }
        let manifest = StepManifest {
            step,
            seed: self.config.step_seed(step),
            config: self.config.step_config(step),
            inputs,
            outputs,
            summary,
            seconds: started.elapsed().as_secs_f64(),
        };
        let path = self.layout.manifest(step);
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(path.parent().expect("manifest path has a parent"))?;
            fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")
        };
        write().map_err(|e| self.failed(step, format!("writing manifest: {e}")))?;
        Ok(StepOutcome { step, ran: true, reason })
    }

    /// Every step in order; stops at the first failure. A step also reruns
    /// when one of its dependencies ran earlier in the same call.
    pub fn run_all(&self) -> Result<Vec<StepOutcome>, PipelineError> {
        let mut outcomes: Vec<StepOutcome> = Vec::new();
        for step in STEPS {
            let upstream = step
                .dependencies()
                .iter()
                .find(|d| outcomes.iter().any(|o| o.step == **d && o.ran));
            let outcome = match (upstream, self.staleness(step)?) {
                (Some(d), None) => {
                    let mut o = self.run_step(step, true)?;
                    o.reason = format!("dependency {d} reran");
                    o
                }
                _ => self.run_step(step, false)?,
            };
            outcomes.push(outcome);
        }
        Ok(outcomes)
    }

    fn failed(&self, step: Step, message: String) -> PipelineError {
        PipelineError::Failed { step, message, manifest: self.manifest_state(step) }
    }

    fn fail<E: fmt::Display>(&self, step: Step) -> impl Fn(E) -> PipelineError + '_ {
        move |e| PipelineError::Failed { step, message: e.to_string(), manifest: String::new() }
    }

    fn ensure_parent(&self, step: Step, path: &Path) -> Result<(), PipelineError> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(self.fail(step))?;
        }
        Ok(())
    }

    pub fn load_splits(&self, step: Step) -> Result<DatasetSplits, PipelineError> {
        DatasetSplits::read_dir(&self.layout.data_dir()).map_err(|e: CorpusError| data_err(step)(e.to_string()))
    }

    pub fn load_vocab(&self, step: Step) -> Result<Vocabulary, PipelineError> {
        Vocabulary::load(&self.layout.tokenizer()).map_err(|e: TokenizerError| data_err(step)(e.to_string()))
    }

    fn load_checkpoint(&self, step: Step, path: &Path, vocab: &Vocabulary) -> Result<Checkpoint, PipelineError> {
        let ck = Checkpoint::load(path).map_err(|e: LmError| data_err(step)(format!("{}: {e}", path.display())))?;
        ck.check_tokenizer(&vocab.hash()).map_err(|e| data_err(step)(e.to_string()))?;
        Ok(ck)
    }

    fn execute(&self, step: Step) -> Result<serde_json::Value, PipelineError> {
        let cfg = &self.config;
        let l = &self.layout;
        let step_seed = cfg.step_seed(step);
        match step {
            Step::SynthData => {
                let data = data_err(step);
                let docs = corpus::load_documents(&cfg.corpus).map_err(|e| data(e.to_string()))?;
                let sentences = corpus::segment_corpus(&docs).map_err(|e| data(e.to_string()))?;
                let splits = corpus::build_dataset(&sentences, &cfg.dataset, step_seed).map_err(|e| data(e.to_string()))?;
                splits.write_dir(&l.data_dir(), &cfg.dataset).map_err(self.fail(step))?;
                let texts = unique_targets(&splits.train);
                let vocab = Vocabulary::train(&texts, cfg.vocab_size).map_err(|e| data(e.to_string()))?;
                vocab.save(&l.tokenizer()).map_err(self.fail(step))?;
                Ok(serde_json::json!({
                    "documents": docs.len(),
                    "sentences": sentences.len(),
                    "pairs": [splits.train.len(), splits.valid.len(), splits.test.len()],
                    "vocab_size": vocab.len(),
                }))
            }
            Step::TrainLm => {
                let splits = self.load_splits(step)?;
                let vocab = self.load_vocab(step)?;
                let model = cfg.causal_model.config(Mode::Causal, vocab.len(), seed::derive(step_seed, "init"));
                let train = TrainConfig { seed: seed::derive(step_seed, "train"), ..cfg.lm_training.clone() };
                let (ck, report) = lm::train_infill(&splits, &vocab, &model, &train).map_err(self.fail(step))?;
                self.save_model(step, &ck, &report, &l.lm(), &l.lm_report())
            }
            Step::TrainScorer => {
                let splits = self.load_splits(step)?;
                let vocab = self.load_vocab(step)?;
                let model = cfg.masked_model.config(Mode::Masked, vocab.len(), seed::derive(step_seed, "init"));
                let train = TrainConfig { seed: seed::derive(step_seed, "train"), ..cfg.scorer_training.clone() };
                let (ck, report) = lm::train_masked(
                    &unique_targets(&splits.train),
                    &unique_targets(&splits.valid),
                    &vocab,
                    &model,
                    &train,
                )
                .map_err(self.fail(step))?;
                self.save_model(step, &ck, &report, &l.scorer(), &l.scorer_report())
            }
            Step::SelectPrompts => {
                let splits = self.load_splits(step)?;
                let vocab = self.load_vocab(step)?;
                let scorer = self.load_checkpoint(step, &l.scorer(), &vocab)?.model().map_err(self.fail(step))?;
                let stats = CorpusStats::from_sentences(unique_targets(&splits.train));
                let report = prompts::filter_prompts(&splits.test, &stats, &cfg.selection);
                let scored =
                    prompts::score_prompts(&scorer, &vocab, &report.kept).map_err(|e: PromptError| self.fail(step)(e))?;
                let labeled = prompts::assign_labels(scored, cfg.selection.decile_fraction).map_err(self.fail(step))?;
                self.ensure_parent(step, &l.prompts())?;
                prompts::write_prompts(&l.prompts(), &labeled).map_err(self.fail(step))?;
                let filter = serde_json::json!({ "kept": report.kept.len(), "rejected": report.rejected });
                fs::write(l.filter_report(), serde_json::to_string_pretty(&filter).expect("json") + "\n")
                    .map_err(self.fail(step))?;
                let count = |d: Difficulty| labeled.iter().filter(|c| c.label == d).count();
                Ok(serde_json::json!({
                    "candidates": splits.test.len(),
                    "kept": report.kept.len(),
                    "easy": count(Difficulty::Easy),
                    "hard": count(Difficulty::Hard),
                }))
            }
            Step::GenExamples => {
                let vocab = self.load_vocab(step)?;
                let model = self.load_checkpoint(step, &l.lm(), &vocab)?.model().map_err(self.fail(step))?;
                let pool = prompts::read_prompts(&l.prompts()).map_err(|e| data_err(step)(e.to_string()))?;
                let labeled: Vec<_> = pool.into_iter().filter(|c| c.label != Difficulty::Unlabeled).collect();
                let blocklist = cfg.load_blocklist().map_err(|e| data_err(step)(e.to_string()))?;
                let outcome =
                    generate::generate_for_prompts(&labeled, &model, &vocab, &cfg.generation, &blocklist, step_seed)
                        .map_err(self.fail(step))?;
                self.ensure_parent(step, &l.examples())?;
                generate::write_examples(&l.examples(), &outcome.records).map_err(self.fail(step))?;
                corpus::write_jsonl(&l.failures(), &outcome.failures).map_err(self.fail(step))?;
                let count = |d: Difficulty| outcome.records.iter().filter(|r| r.label == d).count();
                Ok(serde_json::json!({
                    "prompts": labeled.len(),
                    "completed": outcome.records.len(),
                    "failed": outcome.failures.len(),
                    "easy": count(Difficulty::Easy),
                    "hard": count(Difficulty::Hard),
                }))
            }
        }
    }

    fn save_model(
        &self,
        step: Step,
        ck: &Checkpoint,
        report: &TrainReport,
        ckpt_path: &Path,
        report_path: &Path,
    ) -> Result<serde_json::Value, PipelineError> {
        self.ensure_parent(step, ckpt_path)?;
        ck.save(ckpt_path).map_err(self.fail(step))?;
        let json = serde_json::to_string_pretty(report).map_err(self.fail(step))?;
        fs::write(report_path, json + "\n").map_err(self.fail(step))?;
        Ok(serde_json::json!({
            "steps": report.steps,
            "initial_perplexity": report.initial_perplexity,
            "best_perplexity": report.best_perplexity,
            "best_step": report.best_step,
            "stop": report.stop,
        }))
    }
}

/// Distinct target sentences of a split, in first-seen order.
pub fn unique_targets(pairs: &[InfillPair]) -> Vec<&str> {
    let mut seen = BTreeSet::new();
    pairs.iter().filter(|p| seen.insert(p.target.id.as_str())).map(|p| p.target.text.as_str()).collect()
}
