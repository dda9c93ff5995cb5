use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{MAX_PROMPT_TOKENS, MAX_TARGET_TOKENS};
use super::LmError;
use crate::tokenizer::{Special, Vocabulary};

/// One training sequence: `labels[i]` is the token predicted at position `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub inputs: Vec<u32>,
    pub labels: Vec<Option<u32>>,
}

impl Example {
    pub fn label_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// `{{ prompt }} target <eos>` with the loss restricted to target and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Prompt token ids as fed to the model: `{{`, up to 25 prompt tokens, `}}`.
pub fn prompt_prefix<S: AsRef<str>>(vocab: &Vocabulary, prompt_words: &[S]) -> Vec<u32> {
    // Each word carries its leading space, as in the text form "{{ a b }}",
    // so prompt tokens line up with the same words inside targets.
    let joined: String = prompt_words.iter().map(|w| format!(" {}", w.as_ref())).collect();
    let mut prompt = vocab.encode_ordinary(&joined);
    prompt.truncate(MAX_PROMPT_TOKENS);
    let mut ids = Vec::with_capacity(prompt.len() + 2);
    ids.push(Special::PromptStart.id());
    ids.extend(prompt);
    ids.push(Special::PromptEnd.id());
    ids
}

impl InfillSequence {
    /// Lay out one pair, truncating the prompt to 25 and the target to 75
    /// tokens, and further trimming the target if the model's context is shorter.
    pub fn new<S: AsRef<str>>(vocab: &Vocabulary, prompt_words: &[S], target: &str, max_seq_len: usize) -> Self {
        let mut ids = prompt_prefix(vocab, prompt_words);
        let prefix_len = ids.len();
        let mut target_ids = vocab.encode_ordinary(target);
        target_ids.truncate(MAX_TARGET_TOKENS);
        // Inputs exclude the final EOS, so ids may be one longer than the context.
        let room = (max_seq_len + 1).saturating_sub(prefix_len + 1);
        target_ids.truncate(room);
        ids.extend(target_ids);
        ids.push(Special::Eos.id());
        let loss_mask = (0..ids.len()).map(|i| i >= prefix_len).collect();
        Self { ids, loss_mask }
    }

    /// The loss mask must be false through the prompt end marker.
    pub fn validate(&self) -> Result<(), LmError> {
        if self.ids.len() != self.loss_mask.len() {
            return Err(LmError::MalformedBatch("ids and loss_mask lengths differ".into()));
        }
        let end = self
            .ids
            .iter()
            .position(|&id| id == Special::PromptEnd.id())
            .ok_or_else(|| LmError::MalformedBatch("missing prompt end marker".into()))?;
        if self.loss_mask[..=end].iter().any(|&m| m) {
            return Err(LmError::MalformedBatch("loss_mask set on prompt positions".into()));
        }
        Ok(())
    }

    pub fn to_example(&self) -> Example {
        let n = self.ids.len();
        Example {
            inputs: self.ids[..n.saturating_sub(1)].to_vec(),
            labels: (1..n).map(|i| self.loss_mask[i].then_some(self.ids[i])).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillBatch {
    pub sequences: Vec<InfillSequence>,
}

/// Replace a random `mask_rate` share of positions (at least one) with the
/// mask token; labels hold the originals at those positions only.
pub fn masked_example<R: Rng + ?Sized>(ids: &[u32], mask_rate: f64, rng: &mut R) -> Example {
    let n = ids.len();
    let k = ((mask_rate * n as f64).round() as usize).clamp(1, n.max(1));
    let mut inputs = ids.to_vec();
    let mut labels = vec![None; n];
    if n > 0 {
        for pos in index::sample(rng, n, k) {
            labels[pos] = Some(ids[pos]);
            inputs[pos] = Special::Mask.id();
        }
    }
    Example { inputs, labels }
}
