//! Synthetic authors and raters with known ground-truth effects, replayed
//! through the experiment service and fed to the analytics report.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    build_report, presentation_order, AnalyticsError, Embedder, JudgmentResponse, Report, ReportConfig,
    Source,
};
use crate::experiment::{
    session_split, validate_sentences, BlockExport, Experiment, ExperimentConfig, ExperimentError, MemoryStore,
    PromptPool, Stage, StoryTeller, SubmitRequest, TickClock, EXAMPLES_PER_PROMPT,
};
use crate::generate::{ExampleRecord, GenerationConstraints};
use crate::prompts::Difficulty;
use crate::seed;
use crate::text;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Rater preferences and author behaviour.
///
/// Each response draws a latent storiability for each of the three
/// sentences, `N(base[source], sd)`, adds `post_shift` to POST, and picks one
/// with softmax probabilities. With probability `influence_strength` a POST
/// sentence is a light edit of a random shown example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticAuthorModel {
    /// PRE, POST, GEN.
    pub base: [f64; 3],
    pub sd: f64,
    pub post_shift: f64,
    pub influence_strength: f64,
}

impl Default for SyntheticAuthorModel {
    fn default() -> Self {
        Self { base: [0.0; 3], sd: 0.0, post_shift: 0.0, influence_strength: 0.0 }
    }
}

impl SyntheticAuthorModel {
    pub fn is_null(&self) -> bool {
        self.post_shift == 0.0 && self.influence_strength == 0.0 && self.base.iter().all(|&b| b == self.base[0])
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(self.sd >= 0.0 && self.sd.is_finite()) {
            return Err(SimulationError::InvalidConfig(format!("sd {}", self.sd)));
        }
        if !(0.0..=1.0).contains(&self.influence_strength) {
            return Err(SimulationError::InvalidConfig(format!("influence_strength {}", self.influence_strength)));
        }
        if !self.post_shift.is_finite() || self.base.iter().any(|b| !b.is_finite()) {
            return Err(SimulationError::InvalidConfig("non-finite preference parameter".into()));
        }
        Ok(())
    }

    fn latent(&self, z: [f64; 3]) -> [f64; 3] {
        let mut s = [0.0; 3];
        for i in 0..3 {
            s[i] = self.base[i] + self.sd * z[i];
        }
        s[1] += self.post_shift;
        s
    }

    fn probabilities(&self, z: [f64; 3]) -> [f64; 3] {
        let s = self.latent(z);
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = s.map(|x| (x - m).exp());
        let total: f64 = e.iter().sum();
        e.map(|x| x / total)
    }

    /// One rater's pick among PRE, POST, GEN.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Source {
        let z = if self.sd > 0.0 { std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal)) } else { [0.0; 3] };
        let p = self.probabilities(z);
        let u: f64 = rng.random();
        if u < p[0] {
            Source::Pre
        } else if u < p[0] + p[1] {
            Source::Post
        } else {
            Source::Gen
        }
    }

    /// Expected choice rates, by Monte Carlo over the latent noise. The same
    /// draws are reused for any model sharing `seed`, so the result is a
    /// smooth function of the parameters.
    pub fn preference_rates(&self, n_draws: usize, seed: u64) -> [f64; 3] {
        if self.sd == 0.0 {
            return self.probabilities([0.0; 3]);
        }
        let mut rng = seed::derived_rng(seed, "rates");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut acc = [0.0; 3];
        for _ in 0..n_draws {
            let z = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
            let p = self.probabilities(z);
            for i in 0..3 {
                acc[i] += p[i];
            }
        }
        acc.map(|a| a / n_draws as f64)
    }
}

/// The `post_shift` at which the expected POST rate exceeds the PRE rate by
/// `gap`, for an otherwise unchanged model. Closed form when the model is
/// noiseless with equal bases; bisection otherwise.
pub fn calibrate_post_shift(model: &SyntheticAuthorModel, gap: f64, seed: u64) -> Result<f64, SimulationError> {
    model.validate()?;
    if !(0.0..1.0).contains(&gap) {
        return Err(SimulationError::InvalidConfig(format!("gap {gap}")));
    }
    if model.sd == 0.0 && model.base.iter().all(|&b| b == model.base[0]) {
        // POST rate minus PRE rate is (x - 1) / (x + 2) with x = e^shift.
        return Ok(((1.0 + 2.0 * gap) / (1.0 - gap)).ln());
    }
    let diff = |shift: f64| {
        let m = SyntheticAuthorModel { post_shift: shift, ..model.clone() };
        let r = m.preference_rates(20_000, seed);
        r[1] - r[0]
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if diff(mid) < gap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Hashed bag of lowercased words, unit length. A stand-in for model
/// embeddings in analytics-only runs.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 512 }
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, sentence: &str) -> Result<Vec<f64>, AnalyticsError> {
        let mut v = vec![0.0; self.dim];
        for w in text::words(sentence) {
            let h = seed::derive(0, &w.to_lowercase());
            v[(h % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(AnalyticsError::ZeroVector);
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

const PROMPT_LEXICON: &[&str] = &[
    "dragon", "river", "lantern", "castle", "garden", "whisper", "engine", "forest", "harbor", "mirror", "orchard",
    "thunder", "violin", "meadow", "island", "compass", "blanket", "candle", "desert", "feather", "glacier", "hammer",
    "journal", "kettle", "ladder", "market", "needle", "pocket", "rocket", "saddle", "ticket", "valley", "wagon",
    "window", "basket", "bridge", "cellar", "donkey", "fossil", "goblet", "helmet", "jacket", "kitten", "magnet",
    "pencil", "puzzle", "rabbit", "shadow", "spider", "tunnel", "walnut", "anchor", "bottle", "cactus", "dolphin",
    "falcon", "guitar", "hollow", "igloo", "jungle", "lemon", "marble", "nectar", "oyster", "parrot", "quarry",
    "ribbon", "statue", "tomato", "umbrella", "velvet", "wizard", "zipper", "carried", "painted", "followed",
    "whispered", "gathered", "borrowed", "noticed", "repaired", "climbed", "wandered", "delivered", "buried",
];

const FILLER: &[&str] = &[
    "the", "a", "an", "old", "small", "quiet", "bright", "young", "tired", "happy", "strange", "heavy", "little",
    "with", "near", "under", "over", "beside", "after", "before", "while", "because", "then", "again", "slowly",
    "quickly", "finally", "almost", "never", "always", "often", "soon", "later", "early", "late", "home", "town",
    "friend", "sister", "brother", "mother", "father", "teacher", "neighbor", "child", "dog", "cat", "boy", "girl",
    "man", "woman", "morning", "evening", "night", "day", "winter", "summer", "road", "door", "table", "chair",
    "found", "saw", "took", "gave", "left", "kept", "made", "held", "watched", "heard", "asked", "told", "knew",
    "felt", "wanted", "tried", "waited", "walked", "ran", "sat", "stood", "smiled", "laughed", "cried", "slept",
    "red", "blue", "green", "silver", "golden", "wooden", "warm", "cold", "soft", "loud", "empty", "full", "new",
    "into", "onto", "across", "through", "behind", "around", "toward", "without", "every", "some", "many", "few",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// A random sentence containing `prompt` in order, 8 to 16 words, ending with
/// a period.
pub fn synthetic_sentence<R: Rng + ?Sized>(prompt: &[String], rng: &mut R) -> String {
    let n = rng.random_range(8..=16).max(prompt.len() + 1);
    let mut words: Vec<String> = (0..n - prompt.len()).map(|_| FILLER.choose(rng).expect("non-empty").to_string()).collect();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let mut slots: Vec<usize> = slots[..prompt.len()].to_vec();
    slots.sort_unstable();
    for (p, &at) in prompt.iter().zip(&slots) {
        words.insert(at, p.clone());
    }
    format!("{}.", capitalize(&words.join(" ")))
}

/// `example` with one extra filler word: nearly identical but never equal.
fn light_edit<R: Rng + ?Sized>(example: &str, rng: &mut R) -> String {
    let body = example.trim_end_matches('.');
    let mut words: Vec<String> = body.split_whitespace().map(str::to_string).collect();
    let extra = FILLER.choose(rng).expect("non-empty").to_string();
    let at = rng.random_range(1..=words.len());
    words.insert(at, extra);
    format!("{}.", words.join(" "))
}

/// Prompts and generated examples sized for `n_authors` sessions.
pub fn synthetic_pool(n_authors: usize, seed: u64) -> Vec<ExampleRecord> {
    let (n_easy, n_hard) = (0..n_authors).map(session_split).fold((0, 0), |(e, h), (a, b)| (e + a, h + b));
    let mut rng = seed::derived_rng(seed, "sim/pool");
    (0..n_easy + n_hard)
        .map(|i| {
            let mut prompt: Vec<String> =
                PROMPT_LEXICON.choose_multiple(&mut rng, 3).map(|w| w.to_string()).collect();
            prompt.shuffle(&mut rng);
            let mut sentences: Vec<String> = Vec::new();
            while sentences.len() < EXAMPLES_PER_PROMPT {
                let s = synthetic_sentence(&prompt, &mut rng);
                if !sentences.contains(&s) {
                    sentences.push(s);
                }
            }
            ExampleRecord {
                prompt_id: format!("sim{i:04}"),
                prompt,
                label: if i < n_easy { Difficulty::Easy } else { Difficulty::Hard },
                sentences,
                attempts: EXAMPLES_PER_PROMPT,
                rejection_histogram: BTreeMap::new(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_authors: usize,
    /// Blocks per difficulty given a two-sentence response so that export
    /// drops them.
    pub drop_easy: usize,
    pub drop_hard: usize,
    pub judgment_subset_size: usize,
    pub raters_per_subset: usize,
    pub model: SyntheticAuthorModel,
    pub report: ReportConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_authors: 23,
            drop_easy: 5,
            drop_hard: 1,
            judgment_subset_size: 56,
            raters_per_subset: 2,
            model: SyntheticAuthorModel::default(),
            report: ReportConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub seed: u64,
    pub export: BlockExport,
    pub responses: Vec<JudgmentResponse>,
    /// POST sentences written as edits of a shown example.
    pub copied_posts: usize,
}

struct SilentTeller;

impl StoryTeller for SilentTeller {
    fn continue_story(&self, _seed_sentence: &str, _seed: u64) -> Result<String, ExperimentError> {
        Ok(String::new())
    }
}

fn pre_pair<R: Rng + ?Sized>(prompt: &[String], constraints: &GenerationConstraints, rng: &mut R) -> Vec<String> {
    loop {
        let pair = vec![synthetic_sentence(prompt, rng), synthetic_sentence(prompt, rng)];
        if validate_sentences(prompt, &pair, Stage::Pre, &[] as &[&str], constraints).iter().all(|v| v.accepted) {
            return pair;
        }
    }
}

/// Replay `n_authors` synthetic authors and enough raters to cover every
/// judgment subset through an in-memory experiment.
pub fn simulate_experiment(config: &SimulationConfig, seed: u64) -> Result<SimulationOutput, SimulationError> {
    config.model.validate()?;
    if config.n_authors == 0 || config.raters_per_subset == 0 || config.judgment_subset_size == 0 {
        return Err(SimulationError::InvalidConfig("counts must be positive".into()));
    }
    let records = synthetic_pool(config.n_authors, seed);
    let exp_config = ExperimentConfig {
        seed,
        judgment_subset_size: config.judgment_subset_size,
        raters_per_subset: config.raters_per_subset,
        ..Default::default()
    };
    let constraints = exp_config.constraints.clone();
    let pool = PromptPool::from_records(&records, seed)?;
    let mut exp = Experiment::open(exp_config, pool, Box::new(MemoryStore::new()), Box::new(TickClock::default()))?;
    let mut rng = seed::derived_rng(seed, "sim/authors");
    let (mut drop_easy, mut drop_hard) = (config.drop_easy, config.drop_hard);
    let mut copied = 0;
    let model = &config.model;

    for a in 0..config.n_authors {
        let view = exp.create_session(&format!("author{a:03}"))?;
        let sid = view.session_id.clone();
        for p in &view.prompts {
            let mut pair = pre_pair(&p.words, &constraints, &mut rng);
            let drop = match p.difficulty {
                Difficulty::Easy if drop_easy > 0 => {
                    drop_easy -= 1;
                    true
                }
                Difficulty::Hard if drop_hard > 0 => {
                    drop_hard -= 1;
                    true
                }
                _ => false,
            };
            if drop {
                pair[0] = format!("It was late. {}", pair[0]);
            }
            exp.submit(&sid, &p.prompt_id, &SubmitRequest { stage: Stage::Pre, sentences: pair }, &SilentTeller)?;
        }
        for p in &view.prompts {
            let shown = exp.examples(&sid, &p.prompt_id)?;
            let pair = loop {
                let mut edits = 0;
                let pair: Vec<String> = (0..2)
                    .map(|_| {
                        if rng.random_bool(model.influence_strength) {
                            edits += 1;
                            light_edit(shown.choose(&mut rng).expect("five examples"), &mut rng)
                        } else {
                            synthetic_sentence(&p.words, &mut rng)
                        }
                    })
                    .collect();
                if validate_sentences(&p.words, &pair, Stage::Post, &shown, &constraints).iter().all(|v| v.accepted) {
                    copied += edits;
                    break pair;
                }
            };
            exp.submit(&sid, &p.prompt_id, &SubmitRequest { stage: Stage::Post, sentences: pair }, &SilentTeller)?;
        }
    }

    let export = exp.export_blocks();
    let mut rater_rng = seed::derived_rng(seed, "sim/raters");
    let mut r = 0usize;
    loop {
        let rater = format!("rater{r:03}");
        let task = match exp.judgment_task(&rater) {
            Ok(t) => t,
            Err(ExperimentError::NoJudgmentWork) => break,
            Err(e) => return Err(e.into()),
        };
        let order_seed = exp.state().judgments.as_ref().expect("open").seed;
        for item in &task.items {
            let order = presentation_order(order_seed, &rater, &item.group_id);
            let pick = model.choose(&mut rater_rng);
            let choice = order.iter().position(|&s| s == pick).expect("all sources present");
            exp.submit_judgment(&rater, &item.group_id, choice)?;
        }
        r += 1;
    }
    Ok(SimulationOutput { seed, export, responses: exp.export_responses(), copied_posts: copied })
}

/// Simulate, then run the analytics report on the exported data.
pub fn simulate<E: Embedder + ?Sized>(
    config: &SimulationConfig,
    embedder: &E,
    seed: u64,
) -> Result<(SimulationOutput, Report), SimulationError> {
    let out = simulate_experiment(config, seed)?;
    let report_cfg = ReportConfig { seed, ..config.report.clone() };
    let report = build_report(&out.export.blocks, &out.responses, embedder, &report_cfg)?;
    Ok((out, report))
}

/// Responses only, without the service: `n` independent choices.
pub fn simulate_choices(model: &SyntheticAuthorModel, n: usize, seed: u64) -> Vec<Source> {
    let mut rng = seed::derived_rng(seed, "sim/choices");
    (0..n).map(|_| model.choose(&mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_shift_hits_gap() {
        let m = SyntheticAuthorModel::default();
        let shift = calibrate_post_shift(&m, 0.10, 0).unwrap();
        assert!((shift - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        let r = SyntheticAuthorModel { post_shift: shift, ..m }.preference_rates(1, 0);
        assert!((r[1] - r[0] - 0.10).abs() < 1e-12);
    }

    #[test]
    fn bisection_matches_noisy_rates() {
        let m = SyntheticAuthorModel { sd: 1.0, ..Default::default() };
        let shift = calibrate_post_shift(&m, 0.10, 5).unwrap();
        let r = SyntheticAuthorModel { post_shift: shift, ..m }.preference_rates(20_000, 5);
        assert!((r[1] - r[0] - 0.10).abs() < 1e-6);
    }

    #[test]
    fn synthetic_sentences_are_valid() {
        let mut rng = seed::rng(1);
        let prompt: Vec<String> = vec!["dragon".into(), "river".into(), "candle".into()];
        for _ in 0..200 {
            let s = synthetic_sentence(&prompt, &mut rng);
            let v = validate_sentences(&prompt, &[s.clone()], Stage::Pre, &[] as &[&str], &Default::default());
            assert!(v[0].accepted, "{s}");
            assert_eq!(text::split_sentences(&s).len(), 1);
            let e = light_edit(&s, &mut rng);
            assert_ne!(e, s);
            assert!(crate::generate::contains_in_order(&e, &prompt));
        }
    }

    #[test]
    fn hash_embedder_unit_norm() {
        let v = HashEmbedder::default().embed("The dog ran home.").unwrap();
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
