//! Small transformer language model: causal mode for infilling, masked mode
//! for token scoring.

mod batch;
mod checkpoint;
mod config;
mod infer;
mod model;
mod params;
mod train;

use thiserror::Error;

pub use batch::{masked_example, prompt_prefix, Example, InfillBatch, InfillSequence};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::{Mode, ModelConfig, OptimizerKind, TrainConfig, MAX_PROMPT_TOKENS, MAX_TARGET_TOKENS};
pub use infer::{examples_of, nucleus, sample_nucleus};
pub use model::{softmax, ForwardOutput, KvCache, LanguageModel};
pub use params::{Float, Layout, Slot};
pub use train::{
    accumulate_gradient, perplexity, total_loss, train_model, ExampleSource, MaskedSource, StopReason, TrainReport,
    ValidationRecord,
};

use crate::corpus::{DatasetSplits, InfillPair};
use crate::seed;
use crate::tokenizer::Vocabulary;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("operation requires a {expected:?} model")]
    WrongMode { expected: Mode },
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("train and valid splits must be non-empty")]
    EmptySplit,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("nucleus_p must be in (0, 1], got {0}")]
    InvalidNucleus(f64),
    #[error("position {position} is not a scorable token (sequence length {len})")]
    InvalidPosition { position: usize, len: usize },
    #[error("degenerate output: {0}")]
    Degenerate(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint expects tokenizer {expected}, got {found}")]
    TokenizerMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Infill sequences for a list of pairs.
pub fn pair_sequences(vocab: &Vocabulary, pairs: &[InfillPair], max_seq_len: usize) -> Vec<InfillSequence> {
    pairs.iter().map(|p| InfillSequence::new(vocab, &p.prompt_words, &p.target.text, max_seq_len)).collect()
}

pub fn pair_examples(vocab: &Vocabulary, pairs: &[InfillPair], max_seq_len: usize) -> Vec<Example> {
    pair_sequences(vocab, pairs, max_seq_len).iter().map(InfillSequence::to_example).collect()
}

/// Perplexity of a causal model on a split of infill pairs.
pub fn split_perplexity(model: &LanguageModel, vocab: &Vocabulary, pairs: &[InfillPair]) -> Result<f64, LmError> {
    if pairs.is_empty() {
        return Err(LmError::EmptySplit);
    }
    perplexity(model, &pair_examples(vocab, pairs, model.config().max_seq_len))
}

/// Train a causal infilling model on the train split, early-stopping on valid.
pub fn train_infill(
    splits: &DatasetSplits,
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), LmError> {
    if model_config.mode != Mode::Causal {
        return Err(LmError::WrongMode { expected: Mode::Causal });
    }
    check_vocab(model_config, vocab)?;
    let train = pair_examples(vocab, &splits.train, model_config.max_seq_len);
    let valid = pair_examples(vocab, &splits.valid, model_config.max_seq_len);
    let mut model = LanguageModel::<f32>::new(model_config.clone())?;
    let report = train_model(&mut model, &train, &valid, train_config)?;
    let ck = Checkpoint::from_model(&model, vocab.hash(), report.best_perplexity, report.best_step);
    Ok((ck, report))
}

/// Token ids for masked-mode training and scoring of one sentence.
pub fn sentence_ids(vocab: &Vocabulary, text: &str, max_seq_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode_ordinary(text.trim());
    ids.truncate(max_seq_len);
    ids
}

/// Train a masked scoring model on sentences; validation masks are fixed by the seed.
pub fn train_masked<S: AsRef<str>>(
    train_sentences: &[S],
    valid_sentences: &[S],
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Checkpoint, TrainReport), LmError> {
    if model_config.mode != Mode::Masked {
        return Err(LmError::WrongMode { expected: Mode::Masked });
    }
    check_vocab(model_config, vocab)?;
    let encode = |s: &[S]| -> Vec<Vec<u32>> {
        s.iter()
            .map(|t| sentence_ids(vocab, t.as_ref(), model_config.max_seq_len))
            .filter(|ids| !ids.is_empty())
            .collect()
    };
    let source = MaskedSource { sequences: encode(train_sentences), mask_rate: train_config.mask_rate };
    let mut vrng = seed::derived_rng(train_config.seed, "valid-masks");
    let valid: Vec<Example> = encode(valid_sentences)
        .iter()
        .map(|ids| masked_example(ids, train_config.mask_rate, &mut vrng))
        .collect();
    let mut model = LanguageModel::<f32>::new(model_config.clone())?;
    let report = train_model(&mut model, &source, &valid, train_config)?;
    let ck = Checkpoint::from_model(&model, vocab.hash(), report.best_perplexity, report.best_step);
    Ok((ck, report))
}

fn check_vocab(cfg: &ModelConfig, vocab: &Vocabulary) -> Result<(), LmError> {
    if cfg.vocab_size < vocab.len() {
        return Err(LmError::InvalidConfig(format!(
            "model vocab_size {} smaller than tokenizer vocabulary {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}
