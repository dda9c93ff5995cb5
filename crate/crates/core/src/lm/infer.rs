//! Read-only operations on a trained model: nucleus sampling, infill loss,
//! sentence embeddings and masked-token probabilities.

use rand::Rng;

use super::batch::{Example, InfillBatch};
use super::config::Mode;
use super::model::{softmax, LanguageModel};
use super::params::Float;
use super::LmError;
use crate::tokenizer::{Special, Vocabulary};

/// Token ids of the nucleus for `probs` with their renormalized weights,
/// highest probability first (ties broken by lower id).
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(u32, f64)>, LmError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(LmError::InvalidNucleus(p));
    }
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for id in order {
        kept.push(id);
        cum += probs[id as usize];
        if cum >= p - 1e-12 {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|&i| probs[i as usize]).sum();
    Ok(kept.into_iter().map(|i| (i, probs[i as usize] / mass)).collect())
}

/// Draw one token from the nucleus of `probs`.
pub fn sample_nucleus<R: Rng + ?Sized>(probs: &[f64], p: f64, rng: &mut R) -> Result<u32, LmError> {
    let set = nucleus(probs, p)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, w) in &set {
        acc += w;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(set.last().expect("nucleus is never empty").0)
}

impl<T: Float> LanguageModel<T> {
    /// Continue `prefix_ids` with nucleus sampling until EOS, `max_new_tokens`
    /// or the context limit. The returned ids exclude the prefix; a sampled
    /// EOS is included as the last element.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        prefix_ids: &[u32],
        nucleus_p: f64,
        rng: &mut R,
        max_new_tokens: usize,
    ) -> Result<Vec<u32>, LmError> {
        self.sample_traced(prefix_ids, nucleus_p, rng, max_new_tokens, |_, _| {})
    }

    /// As [`sample`](Self::sample), reporting each step's nucleus and choice.
    pub fn sample_traced<R: Rng + ?Sized>(
        &self,
        prefix_ids: &[u32],
        nucleus_p: f64,
        rng: &mut R,
        max_new_tokens: usize,
        mut trace: impl FnMut(&[(u32, f64)], u32),
    ) -> Result<Vec<u32>, LmError> {
        if self.config().mode != Mode::Causal {
            return Err(LmError::WrongMode { expected: Mode::Causal });
        }
        if !(nucleus_p > 0.0 && nucleus_p <= 1.0) {
            return Err(LmError::InvalidNucleus(nucleus_p));
        }
        if prefix_ids.is_empty() {
            return Err(LmError::EmptyInput);
        }
        let max_len = self.config().max_seq_len;
        if prefix_ids.len() > max_len {
            return Err(LmError::Overlength { len: prefix_ids.len(), max: max_len });
        }
        let mut cache = self.new_cache();
        let mut logits = None;
        for &id in prefix_ids {
            logits = Some(self.step(&mut cache, id)?);
        }
        let mut logits = logits.expect("non-empty prefix");
        let mut out = Vec::new();
        while out.len() < max_new_tokens {
            let probs = softmax(logits.view());
            let set = nucleus(&probs, nucleus_p)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = set.last().expect("nucleus is never empty").0;
            for &(id, w) in &set {
                acc += w;
                if u < acc {
                    pick = id;
                    break;
                }
            }
            trace(&set, pick);
            out.push(pick);
            if pick == Special::Eos.id() || cache.len() >= max_len {
                break;
            }
            logits = self.step(&mut cache, pick)?;
        }
        Ok(out)
    }

    /// Mean cross-entropy over loss-masked positions of a batch.
    pub fn infill_loss(&self, batch: &InfillBatch) -> Result<f64, LmError> {
        let mut total = 0.0;
        let mut count = 0;
        for seq in &batch.sequences {
            seq.validate()?;
            let (l, c) = self.loss(&seq.to_example())?;
            total += l;
            count += c;
        }
        if count == 0 {
            return Err(LmError::EmptyLossMask);
        }
        Ok(total / count as f64)
    }

    /// Mean final hidden state over non-special positions, L2-normalized.
    pub fn embed_ids(&self, ids: &[u32]) -> Result<Vec<f64>, LmError> {
        let hidden = self.hidden_states(ids)?;
        let rows: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| Special::from_id(id).is_none())
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(LmError::EmptyInput);
        }
        let mut v = vec![0.0f64; hidden.ncols()];
        for &r in &rows {
            for (acc, x) in v.iter_mut().zip(hidden.row(r)) {
                *acc += x.f();
            }
        }
        v.iter_mut().for_each(|x| *x /= rows.len() as f64);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(LmError::Degenerate("zero hidden state".into()));
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }

    /// [`embed_ids`](Self::embed_ids) on text, truncated to the context length.
    pub fn embed(&self, vocab: &Vocabulary, text: &str) -> Result<Vec<f64>, LmError> {
        if text.trim().is_empty() {
            return Err(LmError::EmptyInput);
        }
        let mut ids = vocab.encode_ordinary(text.trim());
        ids.truncate(self.config().max_seq_len);
        self.embed_ids(&ids)
    }

    /// Full distribution at `position` after replacing it with the mask token.
    pub fn masked_distribution(&self, ids: &[u32], position: usize) -> Result<Vec<f64>, LmError> {
        if self.config().mode != Mode::Masked {
            return Err(LmError::WrongMode { expected: Mode::Masked });
        }
        let Some(&orig) = ids.get(position) else {
            return Err(LmError::InvalidPosition { position, len: ids.len() });
        };
        if Special::from_id(orig).is_some() {
            return Err(LmError::InvalidPosition { position, len: ids.len() });
        }
        let mut masked = ids.to_vec();
        masked[position] = Special::Mask.id();
        let hidden = self.hidden_states(&masked)?;
        let p = self.params();
        let lay = self.layout();
        let row = hidden.row(position).dot(&lay.head_w.mat(p)) + lay.head_b.vec(p);
        Ok(softmax(row.view()))
    }

    /// Probability of the original token at `position` when it is masked.
    pub fn masked_token_prob(&self, ids: &[u32], position: usize) -> Result<f64, LmError> {
        let dist = self.masked_distribution(ids, position)?;
        Ok(dist[ids[position] as usize])
    }
}

/// Examples for computing perplexity over pre-built sequences.
pub fn examples_of(batch: &InfillBatch) -> Vec<Example> {
    batch.sequences.iter().map(|s| s.to_example()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nucleus_hand_example() {
        let set = nucleus(&[0.5, 0.3, 0.2], 0.7).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set[0].0, 0);
        assert_eq!(set[1].0, 1);
        assert!((set[0].1 - 0.625).abs() < 1e-12);
        assert!((set[1].1 - 0.375).abs() < 1e-12);
    }

    #[test]
    fn nucleus_full_at_one() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(nucleus(&probs, 1.0).unwrap().len(), 4);
    }

    #[test]
    fn nucleus_rejects_bad_p() {
        assert!(nucleus(&[1.0], 0.0).is_err());
        assert!(nucleus(&[1.0], 1.5).is_err());
    }

    #[test]
    fn nucleus_exact_boundary_included() {
        // 0.5 + 0.2 reaches 0.7 exactly and should stop there.
        let set = nucleus(&[0.5, 0.2, 0.2, 0.1], 0.7).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn sampled_tokens_stay_in_nucleus() {
        let probs = [0.05, 0.4, 0.25, 0.2, 0.1];
        let set: Vec<u32> = nucleus(&probs, 0.7).unwrap().iter().map(|x| x.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            assert!(set.contains(&sample_nucleus(&probs, 0.7, &mut rng).unwrap()));
        }
    }
}
