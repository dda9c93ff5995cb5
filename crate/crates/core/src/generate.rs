//! Rejection-sampled example sentences for a prompt.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError};
use crate::lm::{prompt_prefix, LanguageModel, LmError, MAX_TARGET_TOKENS};
use crate::prompts::{Difficulty, PromptCandidate};
use crate::seed;
use crate::text;
use crate::tokenizer::{Special, Vocabulary};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("gave up after {attempts} attempts with {} of {wanted} sentences", partial.len())]
    Exhausted {
        attempts: usize,
        wanted: usize,
        partial: Vec<String>,
        rejection_histogram: BTreeMap<ReasonCode, usize>,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Verdict codes shared by generated and human-written sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    PromptOrder,
    TooShort,
    TooLong,
    Quotes,
    NoTerminalPunct,
    AdjacentRepeat,
    LowDiversity,
    Profanity,
    Duplicate,
    MatchesExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConstraints {
    pub min_words: usize,
    pub max_words: usize,
    pub forbid_quotes: bool,
    pub require_terminal_punct: bool,
    pub forbid_adjacent_repeats: bool,
    pub overlap_threshold: f64,
    pub nucleus_p: f64,
    pub n_outputs: usize,
    pub max_attempts: usize,
    pub max_new_tokens: usize,
}

impl Default for GenerationConstraints {
    fn default() -> Self {
        Self {
            min_words: 7,
            max_words: 50,
            forbid_quotes: true,
            require_terminal_punct: true,
            forbid_adjacent_repeats: true,
            overlap_threshold: 0.60,
            nucleus_p: 0.7,
            n_outputs: 5,
            max_attempts: 500,
            max_new_tokens: MAX_TARGET_TOKENS,
        }
    }
}

impl GenerationConstraints {
    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: &str| Err(GenerateError::InvalidConstraints(m.into()));
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return bad("overlap_threshold must be in (0, 1]");
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return bad("nucleus_p must be in (0, 1]");
        }
        if self.n_outputs == 0 {
            return bad("n_outputs must be at least 1");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        Ok(())
    }

    /// True when no sentence can satisfy both length bounds.
    pub fn unsatisfiable(&self) -> bool {
        self.max_words == 0 || self.min_words > self.max_words
    }
}

/// Words and phrases that trigger `PROFANITY`, matched on lowercased word tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Blocklist {
    entries: Vec<Vec<String>>,
}

impl Blocklist {
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| text::words(&l.to_lowercase()))
            .filter(|w| !w.is_empty())
            .collect();
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self, GenerateError> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn builtin() -> Self {
        Self::parse(include_str!("../data/blocklist.txt"))
    }

    pub fn matches(&self, sentence: &str) -> bool {
        let words: Vec<String> = text::words(sentence).iter().map(|w| w.to_lowercase()).collect();
        self.entries.iter().any(|e| words.windows(e.len()).any(|win| win == e.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateVerdict {
    pub sentence: String,
    pub accepted: bool,
    pub reason_codes: BTreeSet<ReasonCode>,
}

impl CandidateVerdict {
    pub fn new(sentence: &str, reason_codes: BTreeSet<ReasonCode>) -> Self {
        Self { sentence: sentence.to_string(), accepted: reason_codes.is_empty(), reason_codes }
    }
}

fn lower_words(sentence: &str) -> Vec<String> {
    text::words(sentence).iter().map(|w| w.to_lowercase()).collect()
}

/// Word indices (punctuation excluded) of a greedy leftmost in-order match.
pub fn match_positions<S: AsRef<str>>(sentence: &str, prompt_words: &[S]) -> Option<Vec<usize>> {
    let words = lower_words(sentence);
    let mut positions = Vec::with_capacity(prompt_words.len());
    let mut start = 0;
    for p in prompt_words {
        let p = p.as_ref().to_lowercase();
        let offset = words[start..].iter().position(|w| *w == p)?;
        positions.push(start + offset);
        start += offset + 1;
    }
    Some(positions)
}

pub fn contains_in_order<S: AsRef<str>>(sentence: &str, prompt_words: &[S]) -> bool {
    match_positions(sentence, prompt_words).is_some()
}

/// Share of the sentence's word tokens whose lowercased form appears in any
/// accepted sentence.
pub fn word_overlap<S: AsRef<str>>(sentence: &str, accepted: &[S]) -> f64 {
    let words = lower_words(sentence);
    if words.is_empty() || accepted.is_empty() {
        return 0.0;
    }
    let union: HashSet<String> = accepted.iter().flat_map(|s| lower_words(s.as_ref())).collect();
    words.iter().filter(|w| union.contains(*w)).count() as f64 / words.len() as f64
}

fn has_quotes(s: &str) -> bool {
    s.chars().any(|c| matches!(c, '"' | '“' | '”' | '«' | '»' | '„'))
}

fn ends_with_punct(s: &str) -> bool {
    s.trim_end().chars().last().is_some_and(|c| !c.is_alphanumeric())
}

fn has_adjacent_repeat(s: &str) -> bool {
    lower_words(s).windows(2).any(|w| w[0] == w[1])
}

/// Length, order, and punctuation checks shared with human authoring.
pub fn authoring_codes<S: AsRef<str>>(
    sentence: &str,
    prompt_words: &[S],
    constraints: &GenerationConstraints,
) -> BTreeSet<ReasonCode> {
    let mut codes = BTreeSet::new();
    if !contains_in_order(sentence, prompt_words) {
        codes.insert(ReasonCode::PromptOrder);
    }
    let n = text::word_count(sentence);
    if n < constraints.min_words {
        codes.insert(ReasonCode::TooShort);
    }
    if n > constraints.max_words {
        codes.insert(ReasonCode::TooLong);
    }
    if constraints.require_terminal_punct && !ends_with_punct(sentence) {
        codes.insert(ReasonCode::NoTerminalPunct);
    }
    codes
}

/// Evaluate every generation filter and report all violations.
pub fn passes_filters<S: AsRef<str>, A: AsRef<str>>(
    sentence: &str,
    prompt_words: &[S],
    accepted: &[A],
    constraints: &GenerationConstraints,
    blocklist: &Blocklist,
) -> CandidateVerdict {
    let mut codes = authoring_codes(sentence, prompt_words, constraints);
    if constraints.forbid_quotes && has_quotes(sentence) {
        codes.insert(ReasonCode::Quotes);
    }
    if constraints.forbid_adjacent_repeats && has_adjacent_repeat(sentence) {
        codes.insert(ReasonCode::AdjacentRepeat);
    }
    if word_overlap(sentence, accepted) >= constraints.overlap_threshold {
        codes.insert(ReasonCode::LowDiversity);
    }
    if blocklist.matches(sentence) {
        codes.insert(ReasonCode::Profanity);
    }
    CandidateVerdict::new(sentence, codes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub sentences: Vec<String>,
    pub attempts: usize,
    pub rejection_histogram: BTreeMap<ReasonCode, usize>,
}

/// Decode a sampled continuation, dropping a trailing EOS.
fn decode_sample(vocab: &Vocabulary, ids: &[u32]) -> String {
    let body = match ids.last() {
        Some(&last) if last == Special::Eos.id() => &ids[..ids.len() - 1],
        _ => ids,
    };
    let body: Vec<u32> = body.iter().copied().filter(|&id| Special::from_id(id).is_none()).collect();
    vocab.decode(&body).map(|s| s.trim().to_string()).unwrap_or_default()
}

/// Sample until `n_outputs` sentences pass every filter or `max_attempts` runs out.
pub fn generate_examples<S: AsRef<str>, R: Rng + ?Sized>(
    prompt_words: &[S],
    model: &LanguageModel,
    vocab: &Vocabulary,
    constraints: &GenerationConstraints,
    blocklist: &Blocklist,
    rng: &mut R,
) -> Result<GenerationOutput, GenerateError> {
    constraints.validate()?;
    let mut histogram = BTreeMap::new();
    let mut accepted: Vec<String> = Vec::new();
    if constraints.unsatisfiable() {
        return Err(GenerateError::Exhausted {
            attempts: 0,
            wanted: constraints.n_outputs,
            partial: accepted,
            rejection_histogram: histogram,
        });
    }
    let words: Vec<&str> = prompt_words.iter().map(AsRef::as_ref).collect();
    let prefix = prompt_prefix(vocab, &words);
    let max_new = constraints.max_new_tokens.min(model.config().max_seq_len.saturating_sub(prefix.len()) + 1);
    let mut attempts = 0;
    while accepted.len() < constraints.n_outputs {
        if attempts >= constraints.max_attempts {
            return Err(GenerateError::Exhausted {
                attempts,
                wanted: constraints.n_outputs,
                partial: accepted,
                rejection_histogram: histogram,
            });
        }
        attempts += 1;
        let ids = model.sample(&prefix, constraints.nucleus_p, rng, max_new)?;
        let sentence = decode_sample(vocab, &ids);
        let verdict = passes_filters(&sentence, &words, &accepted, constraints, blocklist);
        if verdict.accepted {
            accepted.push(sentence);
        } else {
            for code in verdict.reason_codes {
                *histogram.entry(code).or_default() += 1;
            }
        }
    }
    Ok(GenerationOutput { sentences: accepted, attempts, rejection_histogram: histogram })
}

/// One line of the generated-examples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub prompt_id: String,
    pub prompt: Vec<String>,
    pub label: Difficulty,
    pub sentences: Vec<String>,
    pub attempts: usize,
    pub rejection_histogram: BTreeMap<ReasonCode, usize>,
}

/// A prompt that could not be completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub prompt_id: String,
    pub prompt: Vec<String>,
    pub label: Difficulty,
    pub attempts: usize,
    pub partial: Vec<String>,
    pub rejection_histogram: BTreeMap<ReasonCode, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub records: Vec<ExampleRecord>,
    pub failures: Vec<GenerationFailure>,
}

/// Generate for many prompts in parallel; each prompt draws from its own
/// generator derived from `(seed, prompt id)`.
pub fn generate_for_prompts(
    prompts: &[PromptCandidate],
    model: &LanguageModel,
    vocab: &Vocabulary,
    constraints: &GenerationConstraints,
    blocklist: &Blocklist,
    seed: u64,
) -> Result<BatchOutcome, GenerateError> {
    constraints.validate()?;
    let results: Vec<Result<Result<ExampleRecord, GenerationFailure>, GenerateError>> = prompts
        .par_iter()
        .map(|p| {
            let mut rng = seed::derived_rng(seed, &format!("generate/{}", p.id()));
            match generate_examples(&p.words, model, vocab, constraints, blocklist, &mut rng) {
                Ok(out) => Ok(Ok(ExampleRecord {
                    prompt_id: p.id().to_string(),
                    prompt: p.words.clone(),
                    label: p.label,
                    sentences: out.sentences,
                    attempts: out.attempts,
                    rejection_histogram: out.rejection_histogram,
                })),
                Err(GenerateError::Exhausted { attempts, partial, rejection_histogram, .. }) => {
                    Ok(Err(GenerationFailure {
                        prompt_id: p.id().to_string(),
                        prompt: p.words.clone(),
                        label: p.label,
                        attempts,
                        partial,
                        rejection_histogram,
                    }))
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut outcome = BatchOutcome::default();
    for r in results {
        match r? {
            Ok(rec) => outcome.records.push(rec),
            Err(fail) => outcome.failures.push(fail),
        }
    }
    Ok(outcome)
}

pub fn write_examples(path: &Path, records: &[ExampleRecord]) -> Result<(), GenerateError> {
    Ok(corpus::write_jsonl(path, records)?)
}

pub fn read_examples(path: &Path) -> Result<Vec<ExampleRecord>, GenerateError> {
    Ok(corpus::read_jsonl(path)?)
}
