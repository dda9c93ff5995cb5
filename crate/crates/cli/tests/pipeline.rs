use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use infill_cli::{load_config, GlobalArgs};
use infill_core::pipeline::{Pipeline, PipelineConfig, Step};
use tempfile::TempDir;

const TINY: &str = r#"
vocab_size = 300

[dataset]
pairs_per_sentence = 3

[causal_model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_seq_len = 100

[masked_model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
max_seq_len = 100

[lm_training]
max_steps = 3
batch_size = 4
validate_every_n_steps = 2

[scorer_training]
max_steps = 3
batch_size = 4
validate_every_n_steps = 2

[selection]
min_corpus_freq = 2

[generation]
max_attempts = 2
max_new_tokens = 16
"#;

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/desk_corpus");
        let corpus = root.join("corpus");
        fs::create_dir_all(&corpus).unwrap();
        let mut files: Vec<PathBuf> = fs::read_dir(&src).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        for f in files.iter().take(6) {
            fs::copy(f, corpus.join(f.file_name().unwrap())).unwrap();
        }
        fs::write(root.join("infill.toml"), TINY).unwrap();
        Self { _dir: dir, root }
    }

    fn global(&self, sets: &[&str]) -> GlobalArgs {
        GlobalArgs {
            config: Some(self.root.join("infill.toml")),
            corpus: Some(self.root.join("corpus")),
            out_dir: Some(self.root.join("out")),
            seed: Some(3),
            sets: sets.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn config(&self, sets: &[&str]) -> PipelineConfig {
        load_config(&self.global(sets)).unwrap()
    }

    fn ran(&self, sets: &[&str]) -> Vec<Step> {
        let outcomes = Pipeline::new(self.config(sets)).unwrap().run_all().unwrap();
        outcomes.into_iter().filter(|o| o.ran).map(|o| o.step).collect()
    }

    fn infill(&self, args: &[&str]) -> (i32, String) {
        self.infill_with_corpus(&self.root.join("corpus"), args)
    }

    fn infill_with_corpus(&self, corpus: &Path, args: &[&str]) -> (i32, String) {
        let out = Command::new(env!("CARGO_BIN_EXE_infill"))
            .args(["--config", self.root.join("infill.toml").to_str().unwrap()])
            .args(["--corpus", corpus.to_str().unwrap()])
            .args(["--out-dir", self.root.join("out").to_str().unwrap()])
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
        (out.status.code().unwrap_or(-1), text)
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let fx = Fixture::new();
    let cfg = fx.config(&["lm_training.learning_rate=0.5", "generation.nucleus_p=0.9"]);
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.vocab_size, 300);
    assert_eq!(cfg.lm_training.max_steps, Some(3));
    assert_eq!(cfg.lm_training.learning_rate, 0.5);
    assert_eq!(cfg.generation.nucleus_p, 0.9);
    // Untouched keys keep their defaults.
    assert_eq!(cfg.generation.n_outputs, 5);
    assert_eq!(cfg.selection.decile_fraction, 0.10);
    assert!(load_config(&fx.global(&["lm_training.batch_size=0"])).is_err());
    assert!(load_config(&fx.global(&["no_equals_sign"])).is_err());
}

#[test]
fn run_all_is_resumable_and_idempotent() {
    let fx = Fixture::new();
    let all = vec![Step::SynthData, Step::TrainLm, Step::TrainScorer, Step::SelectPrompts, Step::GenExamples];
    assert_eq!(fx.ran(&[]), all);
    assert_eq!(fx.ran(&[]), Vec::<Step>::new());

    let pipeline = Pipeline::new(fx.config(&[])).unwrap();
    let layout = pipeline.layout().clone();
    let manifest = pipeline.read_manifest(Step::SynthData).unwrap();
    assert_eq!(manifest.seed, pipeline.config().step_seed(Step::SynthData));
    assert!(manifest.inputs.keys().all(|k| k.starts_with("corpus/")));

    // Deleting one artifact reruns that step and everything downstream of it.
    let prompts_before = fs::read(layout.prompts()).unwrap();
    fs::remove_file(layout.prompts()).unwrap();
    assert_eq!(fx.ran(&[]), vec![Step::SelectPrompts, Step::GenExamples]);
    assert_eq!(fs::read(layout.prompts()).unwrap(), prompts_before, "select-prompts is deterministic");

    fs::remove_file(layout.scorer()).unwrap();
    assert_eq!(fx.ran(&[]), vec![Step::TrainScorer, Step::SelectPrompts, Step::GenExamples]);

    // Editing an output by hand counts as stale.
    fs::write(layout.failures(), "").unwrap();
    assert_eq!(fx.ran(&[]), vec![Step::GenExamples]);

    // A config change touches only the steps that read it.
    assert_eq!(fx.ran(&["generation.max_attempts=3"]), vec![Step::GenExamples]);
    assert_eq!(fx.ran(&["generation.max_attempts=3"]), Vec::<Step>::new());

    // Changing the corpus invalidates everything.
    let extra = fx.root.join("corpus/zzz.txt");
    fs::write(&extra, "A brand new sentence arrived at the library with a tiny dog today.\n").unwrap();
    assert_eq!(fx.ran(&["generation.max_attempts=3"]), all);
}

#[test]
fn single_steps_need_their_inputs() {
    let fx = Fixture::new();
    let (code, text) = fx.infill(&["train-lm"]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("train-lm"), "{text}");
    let (code, text) = fx.infill(&["synth-data"]);
    assert_eq!(code, 0, "{text}");
    let (code, text) = fx.infill(&["synth-data"]);
    assert_eq!(code, 0);
    assert!(text.contains("skipped"), "{text}");
    let (code, text) = fx.infill(&["synth-data", "--force"]);
    assert_eq!(code, 0);
    assert!(text.contains("forced"), "{text}");
}

#[test]
fn exit_codes() {
    let fx = Fixture::new();
    assert_eq!(fx.infill(&["--no-such-flag", "run-all"]).0, 1);
    assert_eq!(fx.infill(&["frobnicate"]).0, 1);
    assert_eq!(fx.infill(&["--set", "causal_model.n_heads=3", "run-all"]).0, 1);
    assert_eq!(fx.infill(&["--help"]).0, 0);

    let (code, text) = fx.infill_with_corpus(Path::new("/definitely/not/here"), &["run-all"]);
    assert_eq!(code, 2, "{text}");
    assert!(text.contains("synth-data"), "{text}");

    // No prompt survives the frequency filter, so labeling has nothing to work with.
    let (code, text) = fx.infill(&["--set", "selection.min_corpus_freq=1000000", "run-all"]);
    assert_eq!(code, 3, "{text}");
    assert!(text.contains("select-prompts failed"), "{text}");
    assert!(text.contains("manifest: absent"), "{text}");
}

#[test]
fn simulate_command_writes_reports() {
    let fx = Fixture::new();
    let out = fx.root.join("sim.json");
    let (code, text) = fx.infill(&[
        "simulate",
        "--n-authors",
        "4",
        "--target-gap",
        "0.1",
        "--runs",
        "2",
        "--resamples",
        "200",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{text}");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);
    assert!(v["config"]["model"]["post_shift"].as_f64().unwrap() > 0.0);
    assert_eq!(fx.infill(&["simulate", "--post-shift", "1", "--target-gap", "0.1"]).0, 1);
}
