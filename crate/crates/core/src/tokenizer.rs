//! Byte-level BPE vocabulary with atomic prompt delimiters.
//!
//! Ids `0..256` are raw bytes, the next five ids are the special tokens and
//! every id after that is a learned merge in rank order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::seed::sha256_hex;

pub const BYTE_TOKENS: u32 = 256;
const FORMAT_HEADER: &str = "infill-bpe 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    PromptStart,
    PromptEnd,
    Eos,
    Pad,
    Mask,
}

impl Special {
    pub const ALL: [Special; 5] =
        [Special::PromptStart, Special::PromptEnd, Special::Eos, Special::Pad, Special::Mask];

    pub fn id(self) -> u32 {
        BYTE_TOKENS + self as u32
    }

    pub fn literal(self) -> &'static str {
        match self {
            Special::PromptStart => "{{",
            Special::PromptEnd => "}}",
            Special::Eos => "<|eos|>",
            Special::Pad => "<|pad|>",
            Special::Mask => "<|mask|>",
        }
    }

    pub fn from_id(id: u32) -> Option<Special> {
        id.checked_sub(BYTE_TOKENS).and_then(|i| Self::ALL.get(i as usize).copied())
    }
}

pub const MIN_VOCAB_SIZE: usize = BYTE_TOKENS as usize + Special::ALL.len();
pub const FIRST_MERGE_ID: u32 = MIN_VOCAB_SIZE as u32;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {0} is below the {MIN_VOCAB_SIZE} byte and special tokens")]
    TargetTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Byte span of each token in the source string.
    pub offsets: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    token_bytes: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn class(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Digit
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Split ordinary text into merge-isolated chunks: an optional single
/// leading space followed by a run of one character class, or a whitespace
/// run. Concatenating the chunks reproduces the input.
fn pre_tokenize(text: &str) -> Vec<(usize, &str)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let run_end = |from: usize, cls: CharClass| {
        let mut k = from;
        while k < n && class(chars[k].1) == cls {
            k += 1;
        }
        k
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let cls = class(chars[i].1);
        if cls != CharClass::Space {
            let k = run_end(i + 1, cls);
            out.push(span(text, &chars, i, k));
            i = k;
            continue;
        }
        let j = run_end(i, CharClass::Space);
        if j < n && chars[j - 1].1 == ' ' {
            // The final plain space prefixes the following run.
            if j - 1 > i {
                out.push(span(text, &chars, i, j - 1));
            }
            let k = run_end(j + 1, class(chars[j].1));
            out.push(span(text, &chars, j - 1, k));
            i = k;
        } else {
            out.push(span(text, &chars, i, j));
            i = j;
        }
    }
    out
}

fn span<'a>(text: &'a str, chars: &[(usize, char)], from: usize, to: usize) -> (usize, &'a str) {
    let a = chars[from].0;
    let b = chars.get(to).map_or(text.len(), |c| c.0);
    (a, &text[a..b])
}

impl Vocabulary {
    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        for s in Special::ALL {
            token_bytes.push(s.literal().as_bytes().to_vec());
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut bytes = token_bytes[a as usize].clone();
            bytes.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(bytes);
            ranks.insert((a, b), rank as u32);
        }
        let token_to_id = token_bytes
            .iter()
            .enumerate()
            .filter(|(id, _)| Special::from_id(*id as u32).is_none())
            .map(|(id, b)| (b.clone(), id as u32))
            .collect();
        Self { merges, ranks, token_bytes, token_to_id }
    }

    /// Learn byte-pair merges greedily by pair frequency.
    ///
    /// Ties go to the numerically smallest pair, so the result depends only
    /// on the corpus contents and order.
    pub fn train<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Self, TokenizerError> {
        if target_size < MIN_VOCAB_SIZE {
            return Err(TokenizerError::TargetTooSmall(target_size));
        }
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut chunk_index: HashMap<&str, usize> = HashMap::new();
        let mut words: Vec<(Vec<u32>, u64)> = Vec::new();
        for doc in corpus {
            for (_, chunk) in pre_tokenize(doc.as_ref()) {
                let idx = *chunk_index.entry(chunk).or_insert_with(|| {
                    words.push((chunk.bytes().map(u32::from).collect(), 0));
                    words.len() - 1
                });
                words[idx].1 += 1;
            }
        }
        let mut merges = Vec::new();
        let mut next_id = FIRST_MERGE_ID;
        while (next_id as usize) < target_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (symbols, n) in &words {
                for w in symbols.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += n;
                }
            }
            let Some((&best, _)) = counts
                .iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            else {
                break;
            };
            for (symbols, _) in words.iter_mut() {
                merge_in_place(symbols, best, next_id);
            }
            merges.push(best);
            next_id += 1;
        }
        Ok(Self::from_merges(merges))
    }

    pub fn len(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        Special::from_id(id).is_some()
    }

    /// Encode text, matching special-token literals before BPE.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence { ids: Vec::new(), offsets: Vec::new() };
        let mut plain_start = 0;
        let mut i = 0;
        let bytes = text.as_bytes();
        while i < bytes.len() {
            if let Some(s) = Special::ALL.iter().find(|s| text[i..].starts_with(s.literal())) {
                self.encode_into(&text[plain_start..i], plain_start, &mut seq);
                let end = i + s.literal().len();
                seq.ids.push(s.id());
                seq.offsets.push((i, end));
                i = end;
                plain_start = i;
            } else {
                i += 1;
                while i < bytes.len() && !text.is_char_boundary(i) {
                    i += 1;
                }
            }
        }
        self.encode_into(&text[plain_start..], plain_start, &mut seq);
        seq
    }

    /// Encode text with no special-token matching.
    pub fn encode_ordinary(&self, text: &str) -> Vec<u32> {
        let mut seq = TokenSequence { ids: Vec::new(), offsets: Vec::new() };
        self.encode_into(text, 0, &mut seq);
        seq.ids
    }

    fn encode_into(&self, text: &str, base: usize, seq: &mut TokenSequence) {
        for (off, chunk) in pre_tokenize(text) {
            let mut symbols: Vec<u32> = chunk.bytes().map(u32::from).collect();
            loop {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                merge_in_place(&mut symbols, pair, FIRST_MERGE_ID + rank);
            }
            let mut pos = base + off;
            for id in symbols {
                let len = self.token_bytes[id as usize].len();
                seq.ids.push(id);
                seq.offsets.push((pos, pos + len));
                pos += len;
            }
        }
    }

    /// Decode ids to text. Special ids decode to their literals; byte
    /// sequences that are not valid UTF-8 decode lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let b = self.token_bytes.get(id as usize).ok_or(TokenizerError::UnknownId(id))?;
            bytes.extend_from_slice(b);
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Versioned text serialization: header, specials, then merges in rank order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        writeln!(out, "specials {}", Special::ALL.len()).unwrap();
        for s in Special::ALL {
            writeln!(out, "{} {}", s.id(), s.literal()).unwrap();
        }
        writeln!(out, "merges {}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        out
    }

    pub fn from_file_string(s: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, reason: &str| TokenizerError::Format { line, reason: reason.into() };
        let mut lines = s.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, FORMAT_HEADER)) => {}
            _ => return Err(err(1, "missing header")),
        }
        let (n, l) = lines.next().ok_or_else(|| err(2, "missing specials count"))?;
        if l != format!("specials {}", Special::ALL.len()) {
            return Err(err(n, "unexpected specials count"));
        }
        for s in Special::ALL {
            let (n, l) = lines.next().ok_or_else(|| err(0, "truncated specials"))?;
            if l != format!("{} {}", s.id(), s.literal()) {
                return Err(err(n, "special token mismatch"));
            }
        }
        let (n, l) = lines.next().ok_or_else(|| err(0, "missing merges count"))?;
        let count: usize = l
            .strip_prefix("merges ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| err(n, "bad merges count"))?;
        let mut merges = Vec::with_capacity(count);
        for (n, l) in lines.by_ref().take(count) {
            let mut parts = l.split(' ').map(str::parse::<u32>);
            let (Some(Ok(a)), Some(Ok(b)), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(n, "bad merge line"));
            };
            let limit = FIRST_MERGE_ID + merges.len() as u32;
            if a >= limit || b >= limit || Special::from_id(a).is_some() || Special::from_id(b).is_some() {
                return Err(err(n, "merge references an unavailable id"));
            }
            merges.push((a, b));
        }
        if merges.len() != count {
            return Err(err(0, "truncated merges"));
        }
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary; stored in checkpoints.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_file_string().as_bytes())
    }
}

fn merge_in_place(symbols: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < symbols.len() {
        if r + 1 < symbols.len() && symbols[r] == pair.0 && symbols[r + 1] == pair.1 {
            symbols[w] = new_id;
            r += 2;
        } else {
            symbols[w] = symbols[r];
            r += 1;
        }
        w += 1;
    }
    symbols.truncate(w);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocabulary {
        Vocabulary::train(
            &["the cat sat on the mat. the dog sat on the log.", "{{ cat }} the cat ran."],
            320,
        )
        .unwrap()
    }

    #[test]
    fn most_frequent_pair_merges_first() {
        let v = Vocabulary::train(&["aaaa aaaa"], 263).unwrap();
        assert_eq!(v.merges()[0], (97, 97));
    }

    #[test]
    fn target_below_byte_alphabet_is_rejected() {
        assert!(matches!(Vocabulary::train(&["abc"], 10), Err(TokenizerError::TargetTooSmall(10))));
        assert!(matches!(Vocabulary::train(&["aaaa aaaa"], 260), Err(TokenizerError::TargetTooSmall(260))));
        assert!(matches!(Vocabulary::train(&[""], 300), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn specials_are_atomic() {
        let v = small_vocab();
        let seq = v.encode("{{ he }}");
        assert_eq!(seq.ids.first(), Some(&Special::PromptStart.id()));
        assert_eq!(seq.ids.last(), Some(&Special::PromptEnd.id()));
        assert!(v.merges().iter().all(|&(a, b)| !v.is_special(a) && !v.is_special(b)));
        assert_eq!(v.decode(&seq.ids).unwrap(), "{{ he }}");
        assert!(!v.encode_ordinary("{{").contains(&Special::PromptStart.id()));
    }

    #[test]
    fn empty_round_trip_and_unknown_id() {
        let v = small_vocab();
        assert!(v.encode("").ids.is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(v.decode(&[99_999]), Err(TokenizerError::UnknownId(99_999))));
    }

    #[test]
    fn offsets_cover_source() {
        let v = small_vocab();
        let text = "the cat  sat\n{{ x }}";
        let seq = v.encode(text);
        let mut pos = 0;
        for &(a, b) in &seq.offsets {
            assert_eq!(a, pos);
            pos = b;
        }
        assert_eq!(pos, text.len());
    }

    #[test]
    fn file_round_trip() {
        let v = small_vocab();
        let back = Vocabulary::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(back.merges(), v.merges());
        assert_eq!(back.hash(), v.hash());
        assert!(Vocabulary::from_file_string("nope").is_err());
    }

    #[test]
    fn pre_tokenizer_concatenates_to_input() {
        for s in ["", " ", "  a", "a  b", "hello, world!\n\n  x", "x   ", " a b "] {
            let joined: String = pre_tokenize(s).iter().map(|(_, c)| *c).collect();
            assert_eq!(joined, s);
        }
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_utf8(s in "\\PC{0,40}") {
            let v = small_vocab();
            prop_assert_eq!(v.decode(&v.encode(&s).ids).unwrap(), s.clone());
            prop_assert_eq!(v.decode(&v.encode_ordinary(&s)).unwrap(), s);
        }

        #[test]
        fn prefix_stable_at_whitespace(a in "[a-z.,]{1,12}", b in "[a-z ]{0,12}") {
            let v = small_vocab();
            let whole = v.encode_ordinary(&format!("{a} {b}"));
            let prefix = v.encode_ordinary(&a);
            prop_assert_eq!(&whole[..prefix.len()], &prefix[..]);
        }
    }
}
