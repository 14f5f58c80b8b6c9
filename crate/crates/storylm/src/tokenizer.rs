//! Byte-level byte-pair-encoding tokenizer.
//!
//! The base alphabet is the 256 byte values, so `decode(encode(x)) == x`
//! holds for arbitrary byte strings. Five special tokens occupy ids
//! `0..5` and are atomic: they are split out of the input before
//! pre-tokenization, so merges can neither cross nor produce them.
//!
//! Training counts adjacent symbol pairs over whitespace-aware pre-tokens
//! (a pre-token starts at each whitespace→non-whitespace transition, keeping
//! the leading whitespace attached) and repeatedly merges the most frequent
//! pair, breaking ties by lexicographic order of the pair's byte strings.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

/// Reserved literal forms, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["<|endoftext|>", "<|pad|>", "[MALE]", "[FEMALE]", "[NEUTRAL]"];

/// The end-of-text id. Special ids are fixed by construction: specials
/// occupy `0..5` in [`SPECIAL_TOKENS`] order for every trained tokenizer.
pub const END_OF_TEXT_ID: u32 = 0;

/// The padding id.
pub const PAD_ID: u32 = 1;

const N_SPECIALS: usize = SPECIAL_TOKENS.len();
const N_BYTES: usize = 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target vocab size {target} must exceed base alphabet + specials ({min})")]
    VocabTooSmall { target: usize, min: usize },
    #[error("token id {id} at position {position} is out of range (vocab size {vocab})")]
    IdOutOfRange {
        id: u32,
        position: usize,
        vocab: usize,
    },
    #[error("malformed tokenizer file: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// A trained BPE tokenizer: vocabulary, ordered merges, reserved specials.
///
/// Immutable after training; `encode`/`decode` take `&self` and are safe to
/// call concurrently.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    /// id → token byte string. Specials first, then the 256 single bytes,
    /// then merged tokens in learning order.
    vocab: Vec<Vec<u8>>,
    /// Merge rules in learning order, as `(left, right)` byte strings.
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    /// Merge rules as `(left_id, right_id, merged_id)` for encoding.
    merge_ids: Vec<(u32, u32, u32)>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
    merges: Vec<[String; 2]>,
    specials: Vec<String>,
}

/// Display encoding for raw bytes: printable ASCII `!`..`~` stands for
/// itself, every other byte value `b` is shown as `char(0x100 + b)`.
fn byte_to_char(b: u8) -> char {
    if (0x21..=0x7e).contains(&b) {
        b as char
    } else {
        char::from_u32(0x100 + u32::from(b)).expect("0x100..0x200 are valid scalars")
    }
}

fn char_to_byte(c: char) -> Option<u8> {
    let v = c as u32;
    if (0x21..=0x7e).contains(&v) {
        Some(v as u8)
    } else if (0x100..0x200).contains(&v) {
        Some((v - 0x100) as u8)
    } else {
        None
    }
}

fn bytes_to_display(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| byte_to_char(b)).collect()
}

fn display_to_bytes(s: &str) -> Result<Vec<u8>, TokenizerError> {
    s.chars()
        .map(|c| {
            char_to_byte(c).ok_or_else(|| {
                TokenizerError::Malformed(format!("invalid byte escape {c:?} in token"))
            })
        })
        .collect()
}

/// Splits a byte string into pre-tokens: a pre-token breaks before each
/// whitespace run, so whitespace stays attached to the word that follows it
/// (`"a b"` → `["a", " b"]`). Merges never cross pre-token boundaries.
fn pre_tokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if !bytes[i - 1].is_ascii_whitespace() && bytes[i].is_ascii_whitespace() {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

/// Segments of an input around special-token literals.
enum Segment<'a> {
    Special(u32),
    Raw(&'a [u8]),
}

fn split_specials(bytes: &[u8]) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut pos = 0;
    'outer: while pos < bytes.len() {
        // Leftmost match; SPECIAL_TOKENS has no token that is a prefix of
        // another, so first match at a position is unique.
        let rest = &bytes[pos..];
        let mut best: Option<(usize, usize)> = None; // (offset, special index)
        for (si, s) in SPECIAL_TOKENS.iter().enumerate() {
            if let Some(off) = find_subslice(rest, s.as_bytes()) {
                if best.map_or(true, |(b, _)| off < b) {
                    best = Some((off, si));
                }
            }
        }
        match best {
            Some((off, si)) => {
                if off > 0 {
                    out.push(Segment::Raw(&rest[..off]));
                }
                out.push(Segment::Special(si as u32));
                pos += off + SPECIAL_TOKENS[si].len();
            }
            None => {
                out.push(Segment::Raw(rest));
                break 'outer;
            }
        }
    }
    out
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

impl Tokenizer {
    /// Trains merges on a corpus until the vocabulary reaches
    /// `target_vocab_size` entries (specials + 256 bytes + merges), or fewer
    /// if the corpus runs out of adjacent pairs to merge. Deterministic:
    /// ties between equally frequent pairs go to the lexicographically
    /// smaller pair.
    pub fn train<S: AsRef<str>>(
        corpus: &[S],
        target_vocab_size: usize,
    ) -> Result<Self, TokenizerError> {
        if corpus.is_empty() || corpus.iter().all(|d| d.as_ref().is_empty()) {
            return Err(TokenizerError::EmptyCorpus);
        }
        let min = N_SPECIALS + N_BYTES;
        if target_vocab_size <= min {
            return Err(TokenizerError::VocabTooSmall {
                target: target_vocab_size,
                min,
            });
        }

        let mut tok = Self::base();

        // Pre-token frequency table. Specials are split out first so their
        // bytes never enter the merge statistics.
        let mut word_counts: HashMap<Vec<u8>, u64> = HashMap::new();
        for doc in corpus {
            for seg in split_specials(doc.as_ref().as_bytes()) {
                if let Segment::Raw(raw) = seg {
                    for pre in pre_tokenize(raw) {
                        *word_counts.entry(pre.to_vec()).or_insert(0) += 1;
                    }
                }
            }
        }

        // Words as sequences of token ids, starting from single bytes.
        let mut words: Vec<(Vec<u32>, u64)> = word_counts
            .into_iter()
            .map(|(bytes, count)| {
                let ids = bytes
                    .iter()
                    .map(|&b| (N_SPECIALS + b as usize) as u32)
                    .collect();
                (ids, count)
            })
            .collect();
        // The map iteration order is arbitrary; sort for determinism.
        words.sort_unstable();

        while tok.vocab.len() < target_vocab_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (ids, count) in &words {
                for w in ids.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
                }
            }
            // Most frequent pair; ties broken by the lexicographic order of
            // the pair's byte strings.
            let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tok.vocab[pb.0 as usize], &tok.vocab[pb.1 as usize]);
                    let kb = (&tok.vocab[pa.0 as usize], &tok.vocab[pa.1 as usize]);
                    ka.cmp(&kb)
                })
            });
            let Some(((left, right), _count)) = best else {
                break; // every pre-token is a single symbol
            };

            let mut merged = tok.vocab[left as usize].clone();
            merged.extend_from_slice(&tok.vocab[right as usize]);
            // Each byte string has a single derivation under global greedy
            // replacement, so a merge can never recreate an existing token.
            debug_assert!(!tok.token_to_id.contains_key(&merged));
            let new_id = tok.vocab.len() as u32;
            tok.token_to_id.insert(merged.clone(), new_id);
            tok.merges
                .push((tok.vocab[left as usize].clone(), tok.vocab[right as usize].clone()));
            tok.merge_ids.push((left, right, new_id));
            tok.vocab.push(merged);

            for (ids, _) in &mut words {
                merge_in_place(ids, left, right, new_id);
            }
        }

        Ok(tok)
    }

    fn base() -> Self {
        let mut vocab: Vec<Vec<u8>> = Vec::with_capacity(N_SPECIALS + N_BYTES);
        for s in SPECIAL_TOKENS {
            vocab.push(s.as_bytes().to_vec());
        }
        for b in 0..=255u8 {
            vocab.push(vec![b]);
        }
        let token_to_id = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            vocab,
            merges: Vec::new(),
            merge_ids: Vec::new(),
            token_to_id,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    /// Ordered merge rules as display strings, mostly for inspection.
    pub fn merges_display(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|(a, b)| (bytes_to_display(a), bytes_to_display(b)))
            .collect()
    }

    pub fn end_of_text_id(&self) -> u32 {
        END_OF_TEXT_ID
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    /// Id of a special token literal, if it is one.
    pub fn special_id(&self, literal: &str) -> Option<u32> {
        SPECIAL_TOKENS
            .iter()
            .position(|s| *s == literal)
            .map(|i| i as u32)
    }

    /// Encodes arbitrary bytes. Special-token literals map to their reserved
    /// ids; everything else goes through byte-level BPE.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        for seg in split_specials(bytes) {
            match seg {
                Segment::Special(id) => out.push(id),
                Segment::Raw(raw) => {
                    for pre in pre_tokenize(raw) {
                        if let Some(ids) = cache.get(pre) {
                            out.extend_from_slice(ids);
                            continue;
                        }
                        let ids = self.encode_pre_token(pre);
                        out.extend_from_slice(&ids);
                        cache.insert(pre, ids);
                    }
                }
            }
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Greedy application of the merges in learned order.
    fn encode_pre_token(&self, pre: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = pre
            .iter()
            .map(|&b| (N_SPECIALS + b as usize) as u32)
            .collect();
        for &(left, right, merged) in &self.merge_ids {
            if ids.len() < 2 {
                break;
            }
            merge_in_place(&mut ids, left, right, merged);
        }
        ids
    }

    /// Decodes ids to the original bytes.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            let token = self
                .vocab
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange {
                    id,
                    position,
                    vocab: self.vocab.len(),
                })?;
            out.extend_from_slice(token);
        }
        Ok(out)
    }

    /// Decodes ids to a string. Errors if the bytes are not valid UTF-8;
    /// use [`Tokenizer::decode_lossy`] for model output that may split
    /// multi-byte characters.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes)
            .map_err(|e| TokenizerError::Malformed(format!("decoded bytes are not UTF-8: {e}")))
    }

    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Canonical JSON form: `{"vocab": [...], "merges": [...], "specials": [...]}`.
    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            vocab: self.vocab.iter().map(|t| bytes_to_display(t)).collect(),
            merges: self
                .merges
                .iter()
                .map(|(a, b)| [bytes_to_display(a), bytes_to_display(b)])
                .collect(),
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
        };
        serde_json::to_string(&file).expect("tokenizer file serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        if file.specials != SPECIAL_TOKENS {
            return Err(TokenizerError::Malformed(format!(
                "unexpected specials {:?}",
                file.specials
            )));
        }
        let mut tok = Self::base();
        if file.vocab.len() < tok.vocab.len() {
            return Err(TokenizerError::Malformed(
                "vocab smaller than base alphabet".into(),
            ));
        }
        for (i, display) in file.vocab.iter().enumerate().take(tok.vocab.len()) {
            let expected = if i < N_SPECIALS {
                SPECIAL_TOKENS[i].as_bytes().to_vec()
            } else {
                vec![(i - N_SPECIALS) as u8]
            };
            if i < N_SPECIALS {
                if display != SPECIAL_TOKENS[i] {
                    return Err(TokenizerError::Malformed(format!(
                        "special slot {i} holds {display:?}"
                    )));
                }
            } else if display_to_bytes(display)? != expected {
                return Err(TokenizerError::Malformed(format!(
                    "byte slot {i} holds {display:?}"
                )));
            }
        }
        for [a, b] in &file.merges {
            let left = display_to_bytes(a)?;
            let right = display_to_bytes(b)?;
            let left_id = *tok.token_to_id.get(&left).ok_or_else(|| {
                TokenizerError::Malformed(format!("merge left side {a:?} unknown"))
            })?;
            let right_id = *tok.token_to_id.get(&right).ok_or_else(|| {
                TokenizerError::Malformed(format!("merge right side {b:?} unknown"))
            })?;
            let mut merged = left.clone();
            merged.extend_from_slice(&right);
            let new_id = tok.vocab.len() as u32;
            let expected = file.vocab.get(new_id as usize).ok_or_else(|| {
                TokenizerError::Malformed("more merges than vocab entries".into())
            })?;
            if display_to_bytes(expected)? != merged {
                return Err(TokenizerError::Malformed(format!(
                    "vocab slot {new_id} does not match merge ({a:?}, {b:?})"
                )));
            }
            tok.token_to_id.insert(merged.clone(), new_id);
            tok.merges.push((left, right));
            tok.merge_ids.push((left_id, right_id, new_id));
            tok.vocab.push(merged);
        }
        if tok.vocab.len() != file.vocab.len() {
            return Err(TokenizerError::Malformed(
                "vocab entries beyond base + merges".into(),
            ));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json(&json)
    }
}

/// Replaces every adjacent `(left, right)` with `merged`, scanning left to
/// right so overlapping occurrences resolve greedily.
fn merge_in_place(ids: &mut Vec<u32>, left: u32, right: u32, merged: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < ids.len() {
        if read + 1 < ids.len() && ids[read] == left && ids[read + 1] == right {
            ids[write] = merged;
            read += 2;
        } else {
            ids[write] = ids[read];
            read += 1;
        }
        write += 1;
    }
    ids.truncate(write);
}
