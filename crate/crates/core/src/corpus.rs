//! Story corpus to infilling dataset: segmentation, ablation and splits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::text;

/// Sentences with fewer word tokens (punctuation excluded) are dropped.
pub const MIN_SENTENCE_WORDS: usize = 10;
pub const MIN_DROP_FRACTION: f64 = 0.6;
pub const MAX_DROP_FRACTION: f64 = 1.0;
pub const MIN_CONTENT_RATIO: f64 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus contains no documents")]
    EmptyInput,
    #[error("need at least {need} sentences to fill every split, got {have}")]
    TooFewSentences { have: usize, need: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("{path}:{line}: {source}")]
    Record { path: String, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    pub word_tokens: Vec<String>,
    pub source_doc: String,
}

impl SentenceRecord {
    /// Build a record from raw sentence text, normalizing spacing.
    pub fn new(id: impl Into<String>, raw: &str, source_doc: impl Into<String>) -> Self {
        let word_tokens = text::word_tokens(raw);
        Self {
            id: id.into(),
            text: text::detokenize(&word_tokens),
            word_tokens,
            source_doc: source_doc.into(),
        }
    }

    pub fn word_count(&self) -> usize {
        self.word_tokens.iter().filter(|t| !text::is_punct_token(t)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillPair {
    pub id: String,
    pub prompt_words: Vec<String>,
    pub target: SentenceRecord,
    pub drop_fraction: f64,
}

/// Outcome of one ablation draw. Rejection is routine; callers resample.
#[derive(Debug, Clone, PartialEq)]
pub enum Ablation {
    Accepted(InfillPair),
    Rejected(Rejection),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    EmptyPrompt,
    LowContentRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<(), CorpusError> {
        let r = [self.train, self.valid, self.test];
        let ok = r.iter().all(|x| x.is_finite() && *x >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(CorpusError::InvalidRatios(r))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub ratios: SplitRatios,
    /// Independent ablations drawn per source sentence.
    pub pairs_per_sentence: usize,
    /// Ablation draws attempted per pair before the pair is skipped.
    pub max_resamples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { ratios: SplitRatios::default(), pairs_per_sentence: 1, max_resamples: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<InfillPair>,
    pub valid: Vec<InfillPair>,
    pub test: Vec<InfillPair>,
    pub split_seed: u64,
    /// Sentence-level assignment counts before ablation.
    pub sentence_counts: [usize; 3],
}

/// Segment documents into sentence records with at least ten words.
///
/// Record ids are `<doc>:<index>` where the index counts every segmented
/// sentence of the document, filtered or not.
pub fn segment_corpus(documents: &[Document]) -> Result<Vec<SentenceRecord>, CorpusError> {
    if documents.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let per_doc: Vec<Vec<SentenceRecord>> = documents
        .par_iter()
        .map(|doc| {
            text::split_sentences(&doc.text)
                .iter()
                .enumerate()
                .map(|(i, s)| SentenceRecord::new(format!("{}:{}", doc.id, i), s, doc.id.clone()))
                .filter(|r| r.word_count() >= MIN_SENTENCE_WORDS)
                .collect()
        })
        .collect();
    Ok(per_doc.into_iter().flatten().collect())
}

pub use crate::text::is_content_word;

/// Fraction of content words in a word list (0 for an empty list).
pub fn content_ratio<S: AsRef<str>>(words: &[S]) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    words.iter().filter(|w| text::is_content_word(w.as_ref())).count() as f64 / words.len() as f64
}

/// Ablate a sentence with a drop fraction drawn uniformly from [0.6, 1.0).
pub fn ablate<R: Rng + ?Sized>(sentence: &SentenceRecord, rng: &mut R) -> Ablation {
    let fraction = rng.random_range(MIN_DROP_FRACTION..MAX_DROP_FRACTION);
    ablate_with_fraction(sentence, fraction, rng)
}

/// Remove `floor(fraction * n)` uniformly chosen token positions.
pub fn ablate_with_fraction<R: Rng + ?Sized>(
    sentence: &SentenceRecord,
    drop_fraction: f64,
    rng: &mut R,
) -> Ablation {
    let n = sentence.word_tokens.len();
    let dropped = ((drop_fraction * n as f64).floor() as usize).min(n);
    let keep = n - dropped;
    if keep == 0 {
        return Ablation::Rejected(Rejection::EmptyPrompt);
    }
    let mut positions = index::sample(rng, n, keep).into_vec();
    positions.sort_unstable();
    prompt_from_positions(sentence, &positions, drop_fraction)
}

/// Build the pair that keeps exactly `positions` (ascending) of the sentence.
pub fn prompt_from_positions(
    sentence: &SentenceRecord,
    positions: &[usize],
    drop_fraction: f64,
) -> Ablation {
    if positions.is_empty() {
        return Ablation::Rejected(Rejection::EmptyPrompt);
    }
    let prompt_words: Vec<String> =
        positions.iter().map(|&p| sentence.word_tokens[p].clone()).collect();
    if content_ratio(&prompt_words) < MIN_CONTENT_RATIO {
        return Ablation::Rejected(Rejection::LowContentRatio);
    }
    Ablation::Accepted(InfillPair {
        id: String::new(),
        prompt_words,
        target: sentence.clone(),
        drop_fraction,
    })
}

fn split_counts(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let train = ((ratios.train * n as f64).round() as usize).min(n);
    let valid = ((ratios.valid * n as f64).round() as usize).min(n - train);
    [train, valid, n - train - valid]
}

/// Assign sentences to splits, then ablate each into pairs.
///
/// Assignment happens at sentence level so no target crosses splits. Each
/// sentence ablates with its own generator derived from `(seed, id)`, so the
/// output does not depend on evaluation order.
pub fn build_dataset(
    sentences: &[SentenceRecord],
    config: &DatasetConfig,
    seed: u64,
) -> Result<DatasetSplits, CorpusError> {
    config.ratios.validate()?;
    if sentences.len() < 3 {
        return Err(CorpusError::TooFewSentences { have: sentences.len(), need: 3 });
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut seed::derived_rng(seed, "split"));
    let counts = split_counts(sentences.len(), &config.ratios);
    let mut assigned = [
        order[..counts[0]].to_vec(),
        order[counts[0]..counts[0] + counts[1]].to_vec(),
        order[counts[0] + counts[1]..].to_vec(),
    ];
    let pairs_for = |idx: &mut Vec<usize>| -> Vec<InfillPair> {
        idx.sort_unstable();
        idx.par_iter()
            .map(|&i| sentence_pairs(&sentences[i], config, seed))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    };
    let train = pairs_for(&mut assigned[0]);
    let valid = pairs_for(&mut assigned[1]);
    let test = pairs_for(&mut assigned[2]);
    Ok(DatasetSplits { train, valid, test, split_seed: seed, sentence_counts: counts })
}

fn sentence_pairs(sentence: &SentenceRecord, config: &DatasetConfig, seed: u64) -> Vec<InfillPair> {
    let mut rng = seed::derived_rng(seed, &format!("ablate/{}", sentence.id));
    let mut out = Vec::with_capacity(config.pairs_per_sentence);
    for k in 0..config.pairs_per_sentence {
        for _ in 0..config.max_resamples {
            if let Ablation::Accepted(mut pair) = ablate(sentence, &mut rng) {
                pair.id = format!("{}/{}", sentence.id, k);
                out.push(pair);
                break;
            }
        }
    }
    out
}

/// One line of a split file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub prompt: Vec<String>,
    pub target: String,
    pub drop_fraction: f64,
    pub source_doc: String,
}

impl From<&InfillPair> for PairRecord {
    fn from(p: &InfillPair) -> Self {
        Self {
            id: p.id.clone(),
            prompt: p.prompt_words.clone(),
            target: p.target.text.clone(),
            drop_fraction: p.drop_fraction,
            source_doc: p.target.source_doc.clone(),
        }
    }
}

impl From<PairRecord> for InfillPair {
    fn from(r: PairRecord) -> Self {
        let target_id = r.id.rsplit_once('/').map_or(r.id.as_str(), |(s, _)| s).to_string();
        InfillPair {
            target: SentenceRecord::new(target_id, &r.target, r.source_doc),
            id: r.id,
            prompt_words: r.prompt,
            drop_fraction: r.drop_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub pairs_per_sentence: usize,
    pub sentences: [usize; 3],
    pub counts: SplitCounts,
    pub lexicon_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

impl DatasetSplits {
    pub fn manifest(&self, config: &DatasetConfig) -> DatasetManifest {
        DatasetManifest {
            seed: self.split_seed,
            ratios: config.ratios,
            pairs_per_sentence: config.pairs_per_sentence,
            sentences: self.sentence_counts,
            counts: SplitCounts {
                train: self.train.len(),
                valid: self.valid.len(),
                test: self.test.len(),
            },
            lexicon_hash: text::lexicon_hash(),
        }
    }

    /// Write `train.jsonl`, `valid.jsonl`, `test.jsonl` and `manifest.json`.
    pub fn write_dir(&self, dir: &Path, config: &DatasetConfig) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        for (name, pairs) in SPLIT_NAMES.iter().zip([&self.train, &self.valid, &self.test]) {
            write_pairs(&dir.join(format!("{name}.jsonl")), pairs)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest(config))?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self, CorpusError> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        Ok(Self {
            train: read_pairs(&dir.join("train.jsonl"))?,
            valid: read_pairs(&dir.join("valid.jsonl"))?,
            test: read_pairs(&dir.join("test.jsonl"))?,
            split_seed: manifest.seed,
            sentence_counts: manifest.sentences,
        })
    }
}

pub fn write_pairs(path: &Path, pairs: &[InfillPair]) -> Result<(), CorpusError> {
    let records: Vec<PairRecord> = pairs.iter().map(PairRecord::from).collect();
    write_jsonl(path, &records)
}

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<InfillPair>, CorpusError> {
    read_jsonl::<PairRecord>(path).map(|v| v.into_iter().map(InfillPair::from).collect())
}

/// Read a JSON Lines file, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CorpusError::Record {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Load every regular file in `dir` (sorted by name) as one document.
pub fn load_documents(dir: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok(Document { id, text: fs::read_to_string(&p)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(id: &str, text: &str) -> Document {
        Document { id: id.into(), text: text.into() }
    }

    #[test]
    fn short_sentences_are_filtered() {
        let recs = segment_corpus(&[doc(
            "d",
            "It rained. He rode his bike to town in the pouring rain yesterday evening after work.",
        )])
        .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].word_count(), 14);
        assert_eq!(recs[0].source_doc, "d");
        assert_eq!(recs[0].id, "d:1");
    }

    #[test]
    fn empty_document_and_empty_corpus() {
        assert!(segment_corpus(&[doc("d", "")]).unwrap().is_empty());
        assert!(matches!(segment_corpus(&[]), Err(CorpusError::EmptyInput)));
    }

    #[test]
    fn example_prompt_from_positions() {
        let s = SentenceRecord::new("s", "he rode his bike to town in the pouring rain.", "d");
        match prompt_from_positions(&s, &[0, 5, 9], 0.7) {
            Ablation::Accepted(p) => assert_eq!(p.prompt_words, vec!["he", "town", "rain"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn full_drop_is_rejected() {
        let s = SentenceRecord::new("s", "he rode his bike to town in the pouring rain.", "d");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(ablate_with_fraction(&s, 1.0, &mut rng), Ablation::Rejected(Rejection::EmptyPrompt));
    }

    #[test]
    fn function_heavy_prompt_is_rejected() {
        let s = SentenceRecord::new("s", "he rode his bike to town in the pouring rain.", "d");
        assert_eq!(
            prompt_from_positions(&s, &[0, 2, 5], 0.7),
            Ablation::Rejected(Rejection::LowContentRatio)
        );
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let recs: Vec<_> = (0..10)
            .map(|i| SentenceRecord::new(format!("s{i}"), "one two three four five six seven eight nine ten.", "d"))
            .collect();
        let cfg = DatasetConfig {
            ratios: SplitRatios { train: 0.5, valid: 0.1, test: 0.1 },
            ..Default::default()
        };
        assert!(matches!(build_dataset(&recs, &cfg, 1), Err(CorpusError::InvalidRatios(_))));
        assert!(matches!(
            build_dataset(&recs[..2], &DatasetConfig::default(), 1),
            Err(CorpusError::TooFewSentences { have: 2, need: 3 })
        ));
    }

    #[test]
    fn record_round_trip() {
        let s = SentenceRecord::new("doc:3", "He rode his bike to town in the pouring rain.", "doc");
        let pair = InfillPair { id: "doc:3/0".into(), prompt_words: vec!["rode".into()], target: s, drop_fraction: 0.9 };
        let back = InfillPair::from(PairRecord::from(&pair));
        assert_eq!(back, pair);
    }
}
