//! Tokenization and the static unigram frequency model.
//!
//! The tokenizer is lossless: concatenating the surfaces of a [`TokenStream`]
//! reproduces its source byte for byte. Word and number tokens are maximal
//! runs of alphanumerics (and apostrophes); a run made only of digits may
//! absorb one interior decimal point followed by more digits. Whitespace runs
//! collapse into a single token and any other character is a one-character
//! punctuation token.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("corpus contains no countable tokens")]
    EmptyCorpus,
    #[error("frequency model is inconsistent: {0}")]
    InvalidModel(String),
    #[error("failed to parse frequency model: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Word,
    Number,
    Punctuation,
    Whitespace,
}

impl TokenKind {
    /// Word or number: the kinds that take part in n-grams and frequency counts.
    pub fn is_lexical(self) -> bool {
        matches!(self, TokenKind::Word | TokenKind::Number)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub span: Range<usize>,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    source: String,
    tokens: Vec<Token>,
}

impl TokenStream {
    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices of every non-whitespace token, in stream order.
    pub fn content_indices(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.kind != TokenKind::Whitespace)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn content_len(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| t.kind != TokenKind::Whitespace)
            .count()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '\u{2019}'
}

/// Number of tokens the rest of the toolkit counts for `text` (whitespace excluded).
pub fn count_tokens(text: &str) -> usize {
    tokenize(text).content_len()
}

pub fn tokenize(text: &str) -> TokenStream {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();

    while let Some(&(start, c)) = chars.peek() {
        let (end, kind) = if c.is_whitespace() {
            let mut end = start;
            while let Some(&(i, ch)) = chars.peek() {
                if !ch.is_whitespace() {
                    break;
                }
                end = i + ch.len_utf8();
                chars.next();
            }
            (end, TokenKind::Whitespace)
        } else if is_word_char(c) {
            let mut end = start;
            while let Some(&(i, ch)) = chars.peek() {
                if !is_word_char(ch) {
                    break;
                }
                end = i + ch.len_utf8();
                chars.next();
            }
            let run = &text[start..end];
            if run.bytes().all(|b| b.is_ascii_digit()) {
                // One interior decimal point, only when the fraction is itself
                // a pure digit run (otherwise "4.2abc" would swallow a word).
                let rest = &text[end..];
                if let Some(frac) = rest.strip_prefix('.') {
                    let frac_len = frac.find(|ch: char| !is_word_char(ch)).unwrap_or(frac.len());
                    let frac_run = &frac[..frac_len];
                    if !frac_run.is_empty() && frac_run.bytes().all(|b| b.is_ascii_digit()) {
                        let new_end = end + 1 + frac_len;
                        while let Some(&(i, _)) = chars.peek() {
                            if i >= new_end {
                                break;
                            }
                            chars.next();
                        }
                        end = new_end;
                    }
                }
                (end, TokenKind::Number)
            } else {
                (end, TokenKind::Word)
            }
        } else {
            chars.next();
            (start + c.len_utf8(), TokenKind::Punctuation)
        };
        tokens.push(Token {
            surface: text[start..end].to_string(),
            span: start..end,
            kind,
        });
    }

    TokenStream {
        source: text.to_string(),
        tokens,
    }
}

/// Unigram counts over non-whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FrequencyModel {
    counts: BTreeMap<String, u64>,
    total: u64,
    vocab_size: u64,
}

impl FrequencyModel {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, LexiconError> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for doc in corpus {
            for token in tokenize(doc.as_ref()).tokens {
                if token.kind != TokenKind::Whitespace {
                    *counts.entry(token.surface).or_default() += 1;
                }
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(mut counts: BTreeMap<String, u64>) -> Result<Self, LexiconError> {
        counts.retain(|_, c| *c > 0);
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(LexiconError::EmptyCorpus);
        }
        let vocab_size = counts.len() as u64;
        Ok(Self {
            counts,
            total,
            vocab_size,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, LexiconError> {
        let model: FrequencyModel = serde_json::from_str(json)?;
        let total: u64 = model.counts.values().sum();
        if total != model.total {
            return Err(LexiconError::InvalidModel(format!(
                "total {} does not match sum of counts {}",
                model.total, total
            )));
        }
        if model.vocab_size != model.counts.len() as u64 {
            return Err(LexiconError::InvalidModel(format!(
                "vocabSize {} does not match {} distinct keys",
                model.vocab_size,
                model.counts.len()
            )));
        }
        if total == 0 {
            return Err(LexiconError::EmptyCorpus);
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frequency model serializes")
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn vocab_size(&self) -> u64 {
        self.vocab_size
    }

    /// Add-one smoothed unigram probability `(count + 1) / (N + V + 1)`.
    pub fn smoothed_probability(&self, token: &str) -> f64 {
        (self.count(token) as f64 + 1.0) / ((self.total + self.vocab_size) as f64 + 1.0)
    }

    /// Static self-information in bits.
    pub fn self_information(&self, token: &str) -> f64 {
        -self.smoothed_probability(token).log2()
    }
}

pub fn build_frequency_model<S: AsRef<str>>(corpus: &[S]) -> Result<FrequencyModel, LexiconError> {
    FrequencyModel::build(corpus)
}

pub fn static_self_information(model: &FrequencyModel, token: &str) -> f64 {
    model.self_information(token)
}

/// Splits a corpus file into documents: blank-line separated blocks when the
/// file has any, otherwise one document per non-empty line.
pub fn split_corpus(text: &str) -> Vec<String> {
    let blocks: Vec<String> = text
        .split("\n\n")
        .map(str::trim)
        .filter(|b| !b.is_empty())
        .map(str::to_string)
        .collect();
    if blocks.len() > 1 {
        return blocks;
    }
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}
