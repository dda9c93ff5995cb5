//! Judgment groups, preference distributions, semantic influence, gap-word
//! counts and the evaluation report built from them.

mod permutation;
mod report;

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{authoring_codes, match_positions, GenerationConstraints};
use crate::lm::{LanguageModel, LmError};
use crate::prompts::Difficulty;
use crate::seed;
use crate::text;
use crate::tokenizer::Vocabulary;

pub use permutation::{
    exact_permutation_p, paired_permutation_test, permutation_test, PermutationTestResult, MIN_RESAMPLES,
};
pub use report::{
    build_report, render_text, GapWordsRow, GapWordsTable, NamedTest, PreferenceSimilarityTable, PreferenceTable,
    Report, ReportConfig, SimilarityRow, SimilarityTable,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("sample is empty")]
    EmptySample,
    #[error("paired samples differ in length ({0} vs {1})")]
    UnpairedSamples(usize, usize),
    #[error("n_resamples {0} is below the minimum of 100")]
    TooFewResamples(usize),
    #[error("{0} values are too many to enumerate")]
    TooLargeForEnumeration(usize),
    #[error("no responses")]
    EmptyResponses,
    #[error("zero vector")]
    ZeroVector,
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("example set is empty")]
    EmptyExampleSet,
    #[error("prompt {prompt:?} does not occur in order in {sentence:?}")]
    PromptNotContained { sentence: String, prompt: Vec<String> },
    #[error("block {block_id}: {reason}")]
    MalformedBlock { block_id: String, reason: String },
    #[error("dangling references: {0:?}")]
    Dangling(Vec<String>),
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Origin of a sentence in a judgment group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Pre,
    Post,
    Gen,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Pre, Source::Post, Source::Gen];
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Pre => "PRE",
            Source::Post => "POST",
            Source::Gen => "GEN",
        })
    }
}

/// One author's work on one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthoringBlock {
    pub block_id: String,
    pub author_id: String,
    pub prompt_id: String,
    pub prompt_words: Vec<String>,
    pub difficulty: Difficulty,
    pub pre: Vec<String>,
    pub post: Vec<String>,
    /// In the order shown to the author.
    pub gen: Vec<String>,
}

impl AuthoringBlock {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let bad = |reason: String| Err(AnalyticsError::MalformedBlock { block_id: self.block_id.clone(), reason });
        if self.pre.len() != 2 || self.post.len() != 2 {
            return bad(format!("expected 2 PRE and 2 POST sentences, got {} and {}", self.pre.len(), self.post.len()));
        }
        if self.gen.len() != 5 {
            return bad(format!("expected 5 GEN examples, got {}", self.gen.len()));
        }
        let norm = text::whitespace_normalized;
        if norm(&self.pre[0]) == norm(&self.pre[1]) || norm(&self.post[0]) == norm(&self.post[1]) {
            return bad("repeated sentence within a stage".into());
        }
        let gen: BTreeSet<String> = self.gen.iter().map(|g| norm(g)).collect();
        if self.post.iter().any(|p| gen.contains(&norm(p))) {
            return bad("POST sentence equals a GEN example".into());
        }
        let constraints = GenerationConstraints::default();
        for s in self.pre.iter().chain(&self.post) {
            let codes = authoring_codes(s, &self.prompt_words, &constraints);
            if !codes.is_empty() {
                return bad(format!("sentence {s:?} fails {codes:?}"));
            }
        }
        Ok(())
    }
}

/// One PRE, one POST and one GEN sentence from the same block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentGroup {
    pub group_id: String,
    pub block_id: String,
    pub difficulty: Difficulty,
    pub pre_index: usize,
    pub post_index: usize,
    pub gen_index: usize,
    pub pre: String,
    pub post: String,
    pub gen: String,
}

impl JudgmentGroup {
    pub fn sentence(&self, source: Source) -> &str {
        match source {
            Source::Pre => &self.pre,
            Source::Post => &self.post,
            Source::Gen => &self.gen,
        }
    }
}

/// Eight groups per block: every PRE × POST × first-two-GEN combination.
pub fn build_judgment_groups(blocks: &[AuthoringBlock]) -> Result<Vec<JudgmentGroup>, AnalyticsError> {
    let mut seen = BTreeSet::new();
    let mut groups = Vec::with_capacity(blocks.len() * 8);
    for b in blocks {
        b.validate()?;
        if !seen.insert(&b.block_id) {
            return Err(AnalyticsError::MalformedBlock { block_id: b.block_id.clone(), reason: "duplicate id".into() });
        }
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    groups.push(JudgmentGroup {
                        group_id: format!("{}:{i}{j}{k}", b.block_id),
                        block_id: b.block_id.clone(),
                        difficulty: b.difficulty,
                        pre_index: i,
                        post_index: j,
                        gen_index: k,
                        pre: b.pre[i].clone(),
                        post: b.post[j].clone(),
                        gen: b.gen[k].clone(),
                    });
                }
            }
        }
    }
    Ok(groups)
}

/// Order in which `rater_id` sees the sentences of `group_id`.
pub fn presentation_order(seed: u64, rater_id: &str, group_id: &str) -> [Source; 3] {
    let mut order = Source::ALL;
    order.shuffle(&mut seed::derived_rng(seed, &format!("order/{rater_id}/{group_id}")));
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentResponse {
    pub group_id: String,
    pub rater_id: String,
    pub preferred: Source,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub pre: usize,
    pub post: usize,
    pub gen: usize,
}

impl SourceCounts {
    pub fn get(&self, s: Source) -> usize {
        match s {
            Source::Pre => self.pre,
            Source::Post => self.post,
            Source::Gen => self.gen,
        }
    }

    pub fn add(&mut self, s: Source) {
        match s {
            Source::Pre => self.pre += 1,
            Source::Post => self.post += 1,
            Source::Gen => self.gen += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.pre + self.post + self.gen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceFractions {
    pub pre: f64,
    pub post: f64,
    pub gen: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDistribution {
    pub counts: SourceCounts,
    pub total: usize,
    pub fractions: SourceFractions,
}

impl PreferenceDistribution {
    pub fn from_counts(counts: SourceCounts) -> Result<Self, AnalyticsError> {
        let total = counts.total();
        if total == 0 {
            return Err(AnalyticsError::EmptyResponses);
        }
        let f = |c: usize| c as f64 / total as f64;
        Ok(Self {
            counts,
            total,
            fractions: SourceFractions { pre: f(counts.pre), post: f(counts.post), gen: f(counts.gen) },
        })
    }
}

pub fn preference_distribution<I: IntoIterator<Item = Source>>(
    preferences: I,
) -> Result<PreferenceDistribution, AnalyticsError> {
    let mut counts = SourceCounts::default();
    preferences.into_iter().for_each(|s| counts.add(s));
    PreferenceDistribution::from_counts(counts)
}

/// `dot(u, v) / (|u| |v|)`, clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AnalyticsError> {
    if u.len() != v.len() {
        return Err(AnalyticsError::DimensionMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(AnalyticsError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Any provider of unit-norm sentence vectors.
pub trait Embedder: Sync {
    fn embed(&self, sentence: &str) -> Result<Vec<f64>, AnalyticsError>;
}

/// Sentence vectors from a trained language model.
pub struct LmEmbedder<'a> {
    pub model: &'a LanguageModel,
    pub vocab: &'a Vocabulary,
}

impl Embedder for LmEmbedder<'_> {
    fn embed(&self, sentence: &str) -> Result<Vec<f64>, AnalyticsError> {
        Ok(self.model.embed(self.vocab, sentence)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub score: f64,
    /// Index in the example set of the most similar example.
    pub best_index: usize,
}

/// Highest cosine similarity between `h` and any vector in `gs`.
pub fn influence_from_vectors(h: &[f64], gs: &[Vec<f64>]) -> Result<InfluenceScore, AnalyticsError> {
    if gs.is_empty() {
        return Err(AnalyticsError::EmptyExampleSet);
    }
    let mut best = InfluenceScore { score: f64::NEG_INFINITY, best_index: 0 };
    for (i, g) in gs.iter().enumerate() {
        let c = cosine(h, g)?;
        if c > best.score {
            best = InfluenceScore { score: c, best_index: i };
        }
    }
    Ok(best)
}

pub fn semantic_influence<E: Embedder + ?Sized, S: AsRef<str>>(
    h: &str,
    gs: &[S],
    embedder: &E,
) -> Result<InfluenceScore, AnalyticsError> {
    if gs.is_empty() {
        return Err(AnalyticsError::EmptyExampleSet);
    }
    let hv = embedder.embed(h)?;
    let gv = gs.iter().map(|g| embedder.embed(g.as_ref())).collect::<Result<Vec<_>, _>>()?;
    influence_from_vectors(&hv, &gv)
}

/// Words between consecutive prompt-word matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapWords {
    /// Mean over the interior gaps (0 for prompts of one word).
    pub mean: f64,
    /// Sum over the interior gaps.
    pub total: usize,
}

pub fn gap_words<S: AsRef<str>>(sentence: &str, prompt_words: &[S]) -> Result<GapWords, AnalyticsError> {
    let positions = match_positions(sentence, prompt_words).ok_or_else(|| AnalyticsError::PromptNotContained {
        sentence: sentence.to_string(),
        prompt: prompt_words.iter().map(|p| p.as_ref().to_string()).collect(),
    })?;
    let gaps: Vec<usize> = positions.windows(2).map(|w| w[1] - w[0] - 1).collect();
    let total: usize = gaps.iter().sum();
    let mean = if gaps.is_empty() { 0.0 } else { total as f64 / gaps.len() as f64 };
    Ok(GapWords { mean, total })
}

pub fn mean_gap_words<S: AsRef<str>>(sentence: &str, prompt_words: &[S]) -> Result<f64, AnalyticsError> {
    gap_words(sentence, prompt_words).map(|g| g.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_three_fractions() {
        let d = PreferenceDistribution::from_counts(SourceCounts { pre: 621, post: 636, gen: 487 }).unwrap();
        let r = |x: f64| (x * 1000.0).round() / 1000.0;
        assert_eq!((r(d.fractions.pre), r(d.fractions.post), r(d.fractions.gen)), (0.356, 0.365, 0.279));
        assert_eq!(d.total, 1744);
    }

    #[test]
    fn unanimous_distribution() {
        let d = preference_distribution(vec![Source::Pre; 7]).unwrap();
        assert_eq!((d.fractions.pre, d.fractions.post, d.fractions.gen), (1.0, 0.0, 0.0));
        assert!(preference_distribution(Vec::new()).is_err());
    }

    #[test]
    fn cosine_cases() {
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-9);
        assert!((cosine(&u, &neg).unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn gap_word_examples() {
        assert_eq!(mean_gap_words("he town rain", &["he", "town", "rain"]).unwrap(), 0.0);
        let g = gap_words("he rode his bike to town in the pouring rain .", &["he", "town", "rain"]).unwrap();
        assert_eq!(g.mean, 3.5);
        assert_eq!(g.total, 7);
        assert!(mean_gap_words("rain town he", &["he", "town", "rain"]).is_err());
    }

    #[test]
    fn orders_vary_across_raters() {
        let orders: BTreeSet<[Source; 3]> =
            (0..20).map(|r| presentation_order(1, &format!("r{r}"), "b:000")).collect();
        assert!(orders.len() >= 2);
        assert_eq!(presentation_order(1, "r", "g"), presentation_order(1, "r", "g"));
    }
}
