use serde::{Deserialize, Serialize};

use super::LmError;
use crate::tokenizer::MIN_VOCAB_SIZE;

/// Prompt tokens kept before the target.
pub const MAX_PROMPT_TOKENS: usize = 25;
/// Target tokens kept after the prompt.
pub const MAX_TARGET_TOKENS: usize = 75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Causal,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: trains in minutes on one CPU.
    pub fn desk(mode: Mode, vocab_size: usize) -> Self {
        Self {
            mode,
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 128,
            vocab_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::InvalidConfig(m));
        if [self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_seq_len]
            .iter()
            .any(|&v| v == 0)
        {
            return bad("dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < MAX_PROMPT_TOKENS + MAX_TARGET_TOKENS {
            return bad(format!("max_seq_len {} below 100", self.max_seq_len));
        }
        if self.vocab_size < MIN_VOCAB_SIZE {
            return bad(format!("vocab_size {} cannot hold the special tokens", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub validate_every_n_steps: usize,
    pub early_stop_patience: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerKind,
    /// Hard cap on optimizer steps, independent of epochs.
    pub max_steps: Option<usize>,
    /// Fraction of tokens replaced by the mask token in masked-mode training.
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 32,
            grad_accum_steps: 8,
            validate_every_n_steps: 200,
            early_stop_patience: 25,
            learning_rate: 0.001,
            max_grad_norm: 1.0,
            optimizer: OptimizerKind::Adam,
            max_steps: None,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Validation interval used at full corpus scale.
    pub const FULL_SCALE_VALIDATE_EVERY: usize = 25_000;

    pub fn validate(&self) -> Result<(), LmError> {
        let ints = [
            self.max_epochs,
            self.batch_size,
            self.grad_accum_steps,
            self.validate_every_n_steps,
            self.early_stop_patience,
        ];
        if ints.iter().any(|&v| v == 0) {
            return Err(LmError::InvalidConfig("training counts must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(LmError::InvalidConfig("learning rate / grad norm out of range".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(LmError::InvalidConfig("mask_rate must be in (0, 1)".into()));
        }
        Ok(())
    }
}
