//! Closed-vocabulary word-level tokenizer.
//!
//! Text is split on whitespace; every punctuation character becomes its own
//! token. The vocabulary is the closure of whatever corpora it was built from,
//! so any string drawn from those corpora encodes without unknowns.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    vocab: Vec<String>,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        Tokenizer::from_vocab(r.vocab)
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        TokenizerRepr { vocab: t.vocab }
    }
}

/// Word-level segmentation: whitespace separates words, punctuation characters
/// stand alone.
pub fn segment(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = None;
        for (i, ch) in word.char_indices() {
            if ch.is_alphanumeric() {
                if start.is_none() {
                    start = Some(i);
                }
            } else {
                if let Some(s) = start.take() {
                    out.push(&word[s..i]);
                }
                out.push(&word[i..i + ch.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&word[s..]);
        }
    }
    out
}

impl Tokenizer {
    /// Builds the vocabulary from every text in `corpora`. Specials take ids
    /// 0..3; remaining tokens are ordered by frequency (descending) then
    /// lexicographically.
    pub fn build<'a, I, C>(corpora: I) -> Result<Self>
    where
        I: IntoIterator<Item = C>,
        C: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for corpus in corpora {
            for text in corpus {
                any = true;
                for tok in segment(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(Error::EmptyInput("tokenizer needs at least one text".into()));
        }
        let mut toks: Vec<(&str, u64)> = counts.into_iter().collect();
        toks.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = vec![PAD.to_string(), BOS.to_string(), EOS.to_string()];
        vocab.extend(toks.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_vocab(vocab))
    }

    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Word ids without specials.
    pub fn encode_words(&self, text: &str) -> Result<Vec<u32>> {
        segment(text)
            .into_iter()
            .map(|t| {
                self.id(t).ok_or_else(|| Error::Vocabulary {
                    token: t.to_string(),
                })
            })
            .collect()
    }

    /// `[BOS, words..., EOS]`.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.encode_words(text)?);
        ids.push(EOS_ID);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
