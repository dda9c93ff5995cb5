//! Word-level text handling shared by every stage of the pipeline.
//!
//! Word tokens are whitespace-separated chunks with leading and trailing
//! punctuation detached into single-character tokens. Internal punctuation
//! (`didn't`, `nose-bleed`) stays attached to its word.

use std::sync::OnceLock;

use sha2::{Digest, Sha256};

/// Closed-class words that never count as content words.
///
/// Pronouns, prepositions, determiners, conjunctions, auxiliaries and
/// particles. Degree adverbs such as "more" are deliberately absent.
pub const FUNCTION_WORDS: &[&str] = &[
    // pronouns
    "i", "me", "my", "mine", "myself", "you", "your", "yours", "yourself", "yourselves", "he",
    "him", "his", "himself", "she", "her", "hers", "herself", "it", "its", "itself", "we", "us",
    "our", "ours", "ourselves", "they", "them", "their", "theirs", "themselves", "who", "whom",
    "whose", "which", "what", "whoever", "whatever", "whichever", "someone", "somebody",
    "something", "anyone", "anybody", "anything", "everyone", "everybody", "everything",
    "nobody", "nothing", "one", "oneself", "there",
    // determiners
    "the", "a", "an", "this", "that", "these", "those", "each", "every", "either", "neither",
    "some", "any", "no", "all", "both", "another", "such",
    // prepositions
    "about", "above", "across", "after", "against", "along", "amid", "among", "around", "as",
    "at", "before", "behind", "below", "beneath", "beside", "besides", "between", "beyond", "by",
    "despite", "down", "during", "except", "for", "from", "in", "inside", "into", "like", "near",
    "of", "off", "on", "onto", "out", "outside", "over", "past", "per", "since", "through",
    "throughout", "till", "to", "toward", "towards", "under", "underneath", "until", "unto", "up",
    "upon", "via", "with", "within", "without",
    // conjunctions
    "and", "but", "or", "nor", "so", "yet", "because", "although", "though", "if", "unless",
    "whereas", "while", "whether", "than", "when", "whenever", "where", "wherever", "once",
    // auxiliaries and modals
    "am", "is", "are", "was", "were", "be", "been", "being", "have", "has", "had", "having", "do",
    "does", "did", "will", "would", "shall", "should", "can", "could", "may", "might", "must",
    "ought",
    // particles and contracted forms
    "not", "n't", "'s", "'re", "'ve", "'ll", "'d", "'m",
];

fn function_word_set() -> &'static std::collections::HashSet<&'static str> {
    static SET: OnceLock<std::collections::HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| FUNCTION_WORDS.iter().copied().collect())
}

/// SHA-256 over the lexicon, one lowercase entry per line.
pub fn lexicon_hash() -> String {
    let mut hasher = Sha256::new();
    for w in FUNCTION_WORDS {
        hasher.update(w.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// A token consisting only of non-alphanumeric characters.
pub fn is_punct_token(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric())
}

/// False iff the lowercased word is in the function-word lexicon or is punctuation.
pub fn is_content_word(word: &str) -> bool {
    if word.is_empty() || is_punct_token(word) {
        return false;
    }
    let lower = word.to_lowercase();
    !function_word_set().contains(lower.as_str())
}

/// Split text into word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let Some(first) = chars.iter().position(|c| c.is_alphanumeric()) else {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        };
        let last = chars.iter().rposition(|c| c.is_alphanumeric()).unwrap_or(first);
        out.extend(chars[..first].iter().map(|c| c.to_string()));
        out.push(chars[first..=last].iter().collect());
        out.extend(chars[last + 1..].iter().map(|c| c.to_string()));
    }
    out
}

/// Word tokens with punctuation removed.
pub fn words(text: &str) -> Vec<String> {
    word_tokens(text).into_iter().filter(|t| !is_punct_token(t)).collect()
}

pub fn word_count(text: &str) -> usize {
    word_tokens(text).iter().filter(|t| !is_punct_token(t)).count()
}

fn attaches_left(tok: &str) -> bool {
    matches!(
        tok,
        "." | "," | "!" | "?" | ";" | ":" | ")" | "]" | "}" | "…" | "%" | "’" | "”" | "»"
    )
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{" | "“" | "‘" | "«" | "$")
}

/// Join word tokens back into text.
///
/// `word_tokens(&detokenize(&word_tokens(s)))` equals `word_tokens(s)` for
/// any input; the text stored on sentence records is this normal form.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = false;
    let mut straight_double = 0usize;
    let mut straight_single = 0usize;
    for tok in tokens {
        let tok = tok.as_ref();
        let (left, right) = match tok {
            "\"" => {
                straight_double += 1;
                if straight_double % 2 == 1 {
                    (false, true)
                } else {
                    (true, false)
                }
            }
            "'" => {
                straight_single += 1;
                if straight_single % 2 == 1 {
                    (false, true)
                } else {
                    (true, false)
                }
            }
            _ => (attaches_left(tok), attaches_right(tok)),
        };
        if !out.is_empty() && !left && !glue_next {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = right;
    }
    out
}

/// Canonical whitespace/punctuation form of a sentence.
pub fn normalize(text: &str) -> String {
    detokenize(&word_tokens(text))
}

/// Whitespace-collapsed form used for exact-match comparisons.
pub fn whitespace_normalized(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "st", "jr", "sr", "prof", "mt", "vs", "etc", "e.g", "i.e", "gen",
    "capt", "lt", "col", "sgt", "rev",
];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’' | '»')
}

fn is_opener(c: char) -> bool {
    matches!(c, '"' | '\'' | '(' | '[' | '“' | '‘' | '«')
}

/// Split raw text into sentence strings (trimmed, not length filtered).
///
/// A boundary is a run of `. ! ?` (plus closing quotes/brackets) followed by
/// end of text, or by whitespace and an uppercase letter (optionally behind
/// an opening quote). A single period after a known abbreviation is not a
/// boundary.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        let (_, c) = chars[i];
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        let run_start = i;
        let mut j = i;
        while j < chars.len() && is_terminal(chars[j].1) {
            j += 1;
        }
        let single_period = j - run_start == 1 && c == '.';
        while j < chars.len() && is_closer(chars[j].1) {
            j += 1;
        }
        let end_byte = chars.get(j).map_or(text.len(), |&(b, _)| b);
        let boundary = if j == chars.len() {
            true
        } else if chars[j].1.is_whitespace() {
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            while k < chars.len() && is_opener(chars[k].1) {
                k += 1;
            }
            k < chars.len()
                && chars[k].1.is_uppercase()
                && !(single_period && preceded_by_abbreviation(text, chars[run_start].0))
        } else {
            false
        };
        if boundary {
            let s = text[start..end_byte].trim();
            if !s.is_empty() {
                sentences.push(s.to_string());
            }
            start = end_byte;
        }
        i = j.max(i + 1);
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        sentences.push(rest.to_string());
    }
    sentences
}

fn preceded_by_abbreviation(text: &str, period_byte: usize) -> bool {
    let before = &text[..period_byte];
    let word = before
        .rsplit(|c: char| c.is_whitespace() || c == '(' || c == '"')
        .next()
        .unwrap_or("");
    let lower = word.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
        || (word.chars().count() == 1 && word.chars().all(|c| c.is_uppercase()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detaches_outer_punctuation_only() {
        assert_eq!(
            word_tokens("\"Well, I didn't (really) see it...\""),
            vec![
                "\"", "Well", ",", "I", "didn't", "(", "really", ")", "see", "it", ".", ".", ".",
                "\""
            ]
        );
        assert_eq!(word_tokens("a -- b"), vec!["a", "-", "-", "b"]);
    }

    #[test]
    fn content_words() {
        assert!(is_content_word("town"));
        assert!(!is_content_word("he"));
        assert!(!is_content_word("The"));
        assert!(is_content_word("more"));
        assert!(!is_content_word(","));
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let toks = word_tokens("He said , \"hi . \" ( ok )");
        assert_eq!(detokenize(&toks), "He said, \"hi.\" (ok)");
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        let s = split_sentences(
            "It rained. He rode his bike to town in the pouring rain yesterday evening after work.",
        );
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], "It rained.");
    }

    #[test]
    fn abbreviations_and_lowercase_continuations() {
        let s = split_sentences("Mr. Smith went to Washington. he stayed. Then \"Go!\" she said.");
        assert_eq!(s, vec!["Mr. Smith went to Washington. he stayed.", "Then \"Go!\" she said."]);
        assert_eq!(split_sentences("He left. She stayed here alone forever after.").len(), 2);
        assert!(split_sentences("").is_empty());
        assert_eq!(split_sentences("no terminal punct"), vec!["no terminal punct"]);
    }

    proptest! {
        #[test]
        fn detokenize_is_a_fixed_point(s in "[a-zA-Z0-9 ,.!?;:'\"()\\-]{0,60}") {
            let toks = word_tokens(&s);
            prop_assert_eq!(word_tokens(&detokenize(&toks)), toks);
        }
    }
}
