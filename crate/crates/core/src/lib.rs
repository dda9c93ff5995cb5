//! Sentence infilling toolkit.
//!
//! Builds infilling datasets from story text, trains a small transformer
//! language model (causal for infilling, masked for difficulty scoring),
//! generates filter-constrained example sentences, runs the Pre/Post
//! authoring experiment as an event-sourced state machine, and computes the
//! preference and influence analytics over its output.

pub mod analytics;
pub mod corpus;
pub mod experiment;
pub mod generate;
pub mod lm;
pub mod pipeline;
pub mod prompts;
pub mod seed;
pub mod simulate;
pub mod text;
pub mod tokenizer;

pub use corpus::{DatasetConfig, DatasetSplits, Document, InfillPair, SentenceRecord, SplitRatios};
pub use lm::{Checkpoint, LanguageModel, Mode, ModelConfig, TrainConfig};
pub use tokenizer::{Special, Vocabulary};
