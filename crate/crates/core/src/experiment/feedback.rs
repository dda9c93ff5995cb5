//! Story passages shown to authors after each submission.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::lm::{prompt_prefix, LanguageModel};
use crate::seed;
use crate::text;
use crate::tokenizer::{Special, Vocabulary};

pub const FEEDBACK_MAX_WORDS: usize = 75;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryFeedback {
    pub seed_sentence: String,
    /// Begins with the seed sentence; at most 75 words.
    pub text: String,
    /// Complete sentences shown, counting the seed.
    pub n_sentences: usize,
}

/// Produces raw story text following a seed sentence.
pub trait StoryTeller: Send + Sync {
    /// Continuation only; the seed is prepended by the caller.
    fn continue_story(&self, seed_sentence: &str, seed: u64) -> Result<String, ExperimentError>;
}

fn is_complete(sentence: &str) -> bool {
    let trimmed = sentence.trim_end_matches(|c: char| matches!(c, '"' | '\'' | ')' | ']' | '”' | '’' | '»'));
    trimmed.ends_with(['.', '!', '?'])
}

/// Seed sentence plus every complete continuation sentence that fits within
/// `max_words`, stopping at the first that does not.
pub fn compose_feedback(seed_sentence: &str, continuation: &str, max_words: usize) -> StoryFeedback {
    let seed_sentence = seed_sentence.trim();
    let mut text = seed_sentence.to_string();
    let mut words = text::word_count(seed_sentence);
    let mut n = 1;
    for s in text::split_sentences(continuation) {
        let w = text::word_count(&s);
        if !is_complete(&s) || w == 0 || words + w > max_words {
            break;
        }
        text.push(' ');
        text.push_str(&s);
        words += w;
        n += 1;
    }
    StoryFeedback { seed_sentence: seed_sentence.to_string(), text, n_sentences: n }
}

/// Chains infill generations: each new sentence is prompted with the last
/// content words of the sentence before it.
pub struct LmStoryTeller {
    pub model: Arc<LanguageModel>,
    pub vocab: Arc<Vocabulary>,
    pub nucleus_p: f64,
    pub prompt_words: usize,
    pub max_rounds: usize,
}

impl LmStoryTeller {
    pub fn new(model: Arc<LanguageModel>, vocab: Arc<Vocabulary>) -> Self {
        Self { model, vocab, nucleus_p: 0.7, prompt_words: 2, max_rounds: 8 }
    }
}

impl StoryTeller for LmStoryTeller {
    fn continue_story(&self, seed_sentence: &str, rng_seed: u64) -> Result<String, ExperimentError> {
        let mut rng = seed::rng(rng_seed);
        let mut previous = seed_sentence.to_string();
        let mut out: Vec<String> = Vec::new();
        let mut total = text::word_count(seed_sentence);
        for _ in 0..self.max_rounds {
            let content: Vec<String> =
                text::words(&previous).into_iter().filter(|w| text::is_content_word(w)).map(|w| w.to_lowercase()).collect();
            let prompt = &content[content.len().saturating_sub(self.prompt_words)..];
            let prefix = prompt_prefix(&self.vocab, prompt);
            let max_new = self.model.config().max_seq_len.saturating_sub(prefix.len()) + 1;
            let ids = self.model.sample(&prefix, self.nucleus_p, &mut rng, max_new.min(75))?;
            let body: Vec<u32> = ids.into_iter().filter(|&id| Special::from_id(id).is_none()).collect();
            let sentence = self.vocab.decode(&body).unwrap_or_default().trim().to_string();
            if sentence.is_empty() {
                continue;
            }
            total += text::word_count(&sentence);
            previous = sentence.clone();
            out.push(sentence);
            if total > FEEDBACK_MAX_WORDS {
                break;
            }
        }
        Ok(out.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_complete_sentences_within_cap() {
        let fb = compose_feedback("The dog ran home.", "It was late. Everyone slept. And then", 75);
        assert_eq!(fb.text, "The dog ran home. It was late. Everyone slept.");
        assert_eq!(fb.n_sentences, 3);
        assert!(fb.text.starts_with("The dog ran home."));
    }

    #[test]
    fn stops_at_word_cap() {
        let long = format!("Then {}end.", "word ".repeat(70));
        let fb = compose_feedback("The dog ran home.", &format!("Short one. {long}"), 75);
        assert_eq!(fb.n_sentences, 2);
        assert!(text::word_count(&fb.text) <= 75);
        let none = compose_feedback("The dog ran home.", "", 75);
        assert_eq!(none.n_sentences, 1);
        assert_eq!(none.text, "The dog ran home.");
    }
}
