//! Three-word prompt selection and easy/hard labelling by masked-LM score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, InfillPair, SentenceRecord};
use crate::lm::{LanguageModel, LmError};
use crate::text;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error("prompt pool is empty")]
    EmptyPool,
    #[error("prompt {0:?} encodes to no tokens")]
    Unencodable(Vec<String>),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub prompt_words: usize,
    pub max_function_words: usize,
    /// Minimum occurrences of each word (lowercased) in the training corpus.
    pub min_corpus_freq: usize,
    /// A word is entity-like when more than this share of its
    /// non-sentence-initial occurrences are capitalized.
    pub entity_capital_ratio: f64,
    pub decile_fraction: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            prompt_words: 3,
            max_function_words: 1,
            min_corpus_freq: 5,
            entity_capital_ratio: 0.8,
            decile_fraction: 0.10,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if !(self.decile_fraction > 0.0 && self.decile_fraction < 0.5) {
            return Err(PromptError::InvalidConfig("decile_fraction must be in (0, 0.5)".into()));
        }
        if self.prompt_words == 0 {
            return Err(PromptError::InvalidConfig("prompt_words must be positive".into()));
        }
        Ok(())
    }
}

/// Word frequencies and capitalization counts over a corpus.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    freq: HashMap<String, usize>,
    /// (capitalized, total) over non-sentence-initial occurrences.
    inner_caps: HashMap<String, (usize, usize)>,
}

impl CorpusStats {
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut stats = Self::default();
        for s in sentences {
            for (i, w) in text::words(s).iter().enumerate() {
                let lower = w.to_lowercase();
                *stats.freq.entry(lower.clone()).or_default() += 1;
                if i > 0 {
                    let e = stats.inner_caps.entry(lower).or_default();
                    e.1 += 1;
                    if w.chars().next().is_some_and(char::is_uppercase) {
                        e.0 += 1;
                    }
                }
            }
        }
        stats
    }

    pub fn from_records(records: &[SentenceRecord]) -> Self {
        Self::from_sentences(records.iter().map(|r| r.text.as_str()))
    }

    pub fn frequency(&self, word: &str) -> usize {
        self.freq.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn is_entity_like(&self, word: &str, threshold: f64) -> bool {
        match self.inner_caps.get(&word.to_lowercase()) {
            Some(&(caps, total)) if total > 0 => caps as f64 / total as f64 > threshold,
            _ => false,
        }
    }
}

/// Why a candidate prompt was excluded; the first failing check is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptRejection {
    WordCount,
    Quotes,
    PunctuationOrDigit,
    NamedEntity,
    FunctionWords,
    RareWord,
    Duplicate,
}

/// A prompt that passed the filter battery, before scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilteredPrompt {
    pub words: Vec<String>,
    pub source_pair_id: String,
    pub source_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub words: Vec<String>,
    pub source_pair_id: String,
    pub difficulty_score: f64,
    pub label: Difficulty,
}

impl PromptCandidate {
    /// Stable identifier used by the experiment service.
    pub fn id(&self) -> &str {
        &self.source_pair_id
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<FilteredPrompt>,
    pub rejected: BTreeMap<PromptRejection, usize>,
}

fn has_quote(s: &str) -> bool {
    s.chars().any(|c| matches!(c, '"' | '“' | '”' | '«' | '»' | '„'))
}

/// Run the per-prompt checks in order.
pub fn check_prompt(
    words: &[String],
    source_text: &str,
    stats: &CorpusStats,
    cfg: &SelectionConfig,
) -> Result<(), PromptRejection> {
    if words.len() != cfg.prompt_words {
        return Err(PromptRejection::WordCount);
    }
    if has_quote(source_text) || words.iter().any(|w| has_quote(w)) {
        return Err(PromptRejection::Quotes);
    }
    if words.iter().any(|w| w.is_empty() || !w.chars().all(char::is_alphabetic)) {
        return Err(PromptRejection::PunctuationOrDigit);
    }
    if words.iter().any(|w| stats.is_entity_like(w, cfg.entity_capital_ratio)) {
        return Err(PromptRejection::NamedEntity);
    }
    if words.iter().filter(|w| !text::is_content_word(w)).count() > cfg.max_function_words {
        return Err(PromptRejection::FunctionWords);
    }
    if words.iter().any(|w| stats.frequency(w) < cfg.min_corpus_freq) {
        return Err(PromptRejection::RareWord);
    }
    Ok(())
}

/// Apply the filter battery; repeated prompts (case-insensitive) keep their
/// first occurrence in input order.
pub fn filter_candidates(candidates: &[FilteredPrompt], stats: &CorpusStats, cfg: &SelectionConfig) -> FilterReport {
    let mut report = FilterReport::default();
    let mut seen = HashSet::new();
    for c in candidates {
        match check_prompt(&c.words, &c.source_text, stats, cfg) {
            Err(r) => *report.rejected.entry(r).or_default() += 1,
            Ok(()) => {
                let key: Vec<String> = c.words.iter().map(|w| w.to_lowercase()).collect();
                if seen.insert(key) {
                    report.kept.push(c.clone());
                } else {
                    *report.rejected.entry(PromptRejection::Duplicate).or_default() += 1;
                }
            }
        }
    }
    report
}

/// Filter the prompts of test-split pairs.
pub fn filter_prompts(pairs: &[InfillPair], stats: &CorpusStats, cfg: &SelectionConfig) -> FilterReport {
    let candidates: Vec<FilteredPrompt> = pairs
        .iter()
        .map(|p| FilteredPrompt {
            words: p.prompt_words.clone(),
            source_pair_id: p.id.clone(),
            source_text: p.target.text.clone(),
        })
        .collect();
    filter_candidates(&candidates, stats, cfg)
}

/// Anything that can give the masked probability of a token in context.
pub trait MaskedScorer: Sync {
    fn masked_token_prob(&self, ids: &[u32], position: usize) -> Result<f64, LmError>;
}

impl MaskedScorer for LanguageModel<f32> {
    fn masked_token_prob(&self, ids: &[u32], position: usize) -> Result<f64, LmError> {
        LanguageModel::masked_token_prob(self, ids, position)
    }
}

/// Mean masked probability over every subword position of the space-joined words.
pub fn difficulty_score<M: MaskedScorer + ?Sized>(
    scorer: &M,
    vocab: &Vocabulary,
    words: &[String],
) -> Result<f64, PromptError> {
    let ids = vocab.encode_ordinary(&words.join(" "));
    if ids.is_empty() {
        return Err(PromptError::Unencodable(words.to_vec()));
    }
    let mut sum = 0.0;
    for pos in 0..ids.len() {
        sum += scorer.masked_token_prob(&ids, pos)?;
    }
    Ok(sum / ids.len() as f64)
}

/// Score every filtered prompt in parallel; labels start as unlabeled.
pub fn score_prompts<M: MaskedScorer + ?Sized>(
    scorer: &M,
    vocab: &Vocabulary,
    prompts: &[FilteredPrompt],
) -> Result<Vec<PromptCandidate>, PromptError> {
    prompts
        .par_iter()
        .map(|p| {
            Ok(PromptCandidate {
                words: p.words.clone(),
                source_pair_id: p.source_pair_id.clone(),
                difficulty_score: difficulty_score(scorer, vocab, &p.words)?,
                label: Difficulty::Unlabeled,
            })
        })
        .collect()
}

/// `round(fraction * n)` with halves rounded up.
pub fn decile_count(n: usize, fraction: f64) -> usize {
    // The epsilon absorbs binary representation error in values like
    // 0.1 * 23005 so exact halves round up.
    ((fraction * n as f64 + 0.5 + 1e-9).floor() as usize).min(n / 2)
}

/// Sort by score descending (ties by prompt id) and label the top and bottom
/// `fraction` easy and hard.
pub fn assign_labels(mut pool: Vec<PromptCandidate>, fraction: f64) -> Result<Vec<PromptCandidate>, PromptError> {
    if pool.is_empty() {
        return Err(PromptError::EmptyPool);
    }
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(PromptError::InvalidConfig("decile_fraction must be in (0, 0.5)".into()));
    }
    pool.sort_by(|a, b| {
        b.difficulty_score.total_cmp(&a.difficulty_score).then_with(|| a.source_pair_id.cmp(&b.source_pair_id))
    });
    let k = decile_count(pool.len(), fraction);
    let n = pool.len();
    for (i, c) in pool.iter_mut().enumerate() {
        c.label = if i < k {
            Difficulty::Easy
        } else if i >= n - k {
            Difficulty::Hard
        } else {
            Difficulty::Unlabeled
        };
    }
    Ok(pool)
}

/// On-disk prompt record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub words: Vec<String>,
    pub score: f64,
    pub label: Difficulty,
    pub source_pair_id: String,
}

impl From<&PromptCandidate> for PromptRecord {
    fn from(c: &PromptCandidate) -> Self {
        Self {
            words: c.words.clone(),
            score: c.difficulty_score,
            label: c.label,
            source_pair_id: c.source_pair_id.clone(),
        }
    }
}

impl From<PromptRecord> for PromptCandidate {
    fn from(r: PromptRecord) -> Self {
        Self { words: r.words, source_pair_id: r.source_pair_id, difficulty_score: r.score, label: r.label }
    }
}

pub fn write_prompts(path: &Path, pool: &[PromptCandidate]) -> Result<(), PromptError> {
    let records: Vec<PromptRecord> = pool.iter().map(PromptRecord::from).collect();
    corpus::write_jsonl(path, &records)?;
    Ok(())
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptCandidate>, PromptError> {
    Ok(corpus::read_jsonl::<PromptRecord>(path)?.into_iter().map(Into::into).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn stats() -> CorpusStats {
        let mut lines = Vec::new();
        for _ in 0..6 {
            lines.push("Then he saw a peculiar man rob more than one town in the rain.");
            lines.push("Yesterday we met Alice near the town and saw dogs.");
        }
        CorpusStats::from_sentences(lines)
    }

    fn check(words: &str) -> Result<(), PromptRejection> {
        check_prompt(&w(words), "A plain sentence.", &stats(), &SelectionConfig::default())
    }

    #[test]
    fn three_word_prompts() {
        assert_eq!(check("peculiar rob more"), Ok(()));
        assert_eq!(check("he town rain"), Ok(()));
        assert_eq!(check("he the rain"), Err(PromptRejection::FunctionWords));
        assert_eq!(check("saw 3 dogs"), Err(PromptRejection::PunctuationOrDigit));
        assert_eq!(check("met Alice town"), Err(PromptRejection::NamedEntity));
        assert_eq!(check("peculiar rob"), Err(PromptRejection::WordCount));
        assert_eq!(check("peculiar zebra more"), Err(PromptRejection::RareWord));
        assert_eq!(
            check_prompt(&w("peculiar rob more"), "He said \"no\" to it.", &stats(), &SelectionConfig::default()),
            Err(PromptRejection::Quotes)
        );
    }

    #[test]
    fn decile_counts() {
        assert_eq!(decile_count(23_005, 0.10), 2_301);
        assert_eq!(decile_count(10, 0.10), 1);
        assert_eq!(decile_count(15, 0.10), 2);
        assert_eq!(decile_count(14, 0.10), 1);
    }

    #[test]
    fn labels_follow_scores_and_ties() {
        let pool: Vec<PromptCandidate> = (0..10)
            .map(|i| PromptCandidate {
                words: w("a b c"),
                source_pair_id: format!("p{i}"),
                difficulty_score: 0.5,
                label: Difficulty::Unlabeled,
            })
            .collect();
        let a = assign_labels(pool.clone(), 0.1).unwrap();
        let b = assign_labels(pool.into_iter().rev().collect(), 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].source_pair_id, "p0");
        assert_eq!(a[0].label, Difficulty::Easy);
        assert_eq!(a[9].source_pair_id, "p9");
        assert_eq!(a[9].label, Difficulty::Hard);
        assert!(assign_labels(Vec::new(), 0.1).is_err());
    }

    struct Constant(f64);
    impl MaskedScorer for Constant {
        fn masked_token_prob(&self, _ids: &[u32], _position: usize) -> Result<f64, LmError> {
            Ok(self.0)
        }
    }

    #[test]
    fn constant_scorer_gives_constant_score() {
        let vocab = Vocabulary::train(&["his body relax"], 270).unwrap();
        let s = difficulty_score(&Constant(0.5), &vocab, &w("his body relax")).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }
}
