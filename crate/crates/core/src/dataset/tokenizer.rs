use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Token budget including the start and end markers.
pub const MAX_TEXT_LEN: usize = 17;
/// Budget for the long-expression profile.
pub const LONG_MAX_TEXT_LEN: usize = 22;

/// Maps text to token ids. Implementations must be deterministic.
pub trait Vocabulary {
    /// Ids for the expression body, without start/end markers.
    fn body_ids(&self, text: &str) -> Vec<u32>;
    fn sos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn size(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionTokens {
    pub ids: Vec<u32>,
    pub true_length: usize,
    pub sos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
}

impl ExpressionTokens {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn eos_index(&self) -> usize {
        self.true_length - 1
    }

    /// `true` for positions holding real tokens.
    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.true_length).collect()
    }
}

/// `SOS body EOS PAD...`; bodies longer than `max_len - 2` are cut so the
/// end marker always survives.
pub fn tokenize(
    expression: &str,
    vocab: &dyn Vocabulary,
    max_len: usize,
) -> Result<ExpressionTokens, DatasetError> {
    if max_len < 3 {
        return Err(DatasetError::InvalidMaxLen(max_len));
    }
    if expression.trim().is_empty() {
        return Err(DatasetError::EmptyExpression);
    }
    let mut body = vocab.body_ids(expression);
    if body.is_empty() {
        return Err(DatasetError::EmptyExpression);
    }
    body.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.sos_id());
    ids.extend(body);
    ids.push(vocab.eos_id());
    let true_length = ids.len();
    ids.resize(max_len, vocab.pad_id());
    Ok(ExpressionTokens {
        ids,
        true_length,
        sos_id: vocab.sos_id(),
        eos_id: vocab.eos_id(),
        pad_id: vocab.pad_id(),
    })
}

/// Whitespace + lowercase word vocabulary.
///
/// Ids 0..4 are reserved for pad, start, end and unknown; words follow in
/// sorted order so the mapping depends only on the word set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

const PAD: u32 = 0;
const SOS: u32 = 1;
const EOS: u32 = 2;
const UNK: u32 = 3;
const RESERVED: u32 = 4;

fn normalize_word(w: &str) -> Option<String> {
    let t = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    (!t.is_empty()).then_some(t)
}

pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(normalize_word)
}

impl WordVocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut words: Vec<String> = words.into_iter().filter_map(|w| normalize_word(&w)).collect();
        words.sort();
        words.dedup();
        let mut v = Self {
            words,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn from_expressions<'a>(expressions: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_words(expressions.into_iter().flat_map(|e| split_words(e).collect::<Vec<_>>()))
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Must be called after deserializing.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32 + RESERVED))
            .collect();
    }

    pub fn unk_id(&self) -> u32 {
        UNK
    }
}

impl Vocabulary for WordVocab {
    fn body_ids(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    fn sos_id(&self) -> u32 {
        SOS
    }

    fn eos_id(&self) -> u32 {
        EOS
    }

    fn pad_id(&self) -> u32 {
        PAD
    }

    fn size(&self) -> usize {
        self.words.len() + RESERVED as usize
    }
}
