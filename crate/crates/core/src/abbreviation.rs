//! Lossless n-gram abbreviation.
//!
//! Frequent word n-grams of an attached document are replaced by short
//! placeholders (`A1`, `B1`, …, `Z1`, `AA1`, …) that never occur in the
//! document. The dictionary is tied to its source by a SHA-256 hash and
//! expansion verifies that hash, so a tampered dictionary or text is
//! reported instead of silently producing different bytes.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lexicon::{tokenize, Token, TokenKind, TokenStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AbbrevError {
    #[error("dictionary was built for source {expected}, got {found}")]
    DictionaryMismatch { expected: String, found: String },
    #[error("unknown placeholder {0:?}")]
    UnknownPlaceholder(String),
    #[error("expanded text does not match the dictionary's source hash")]
    IntegrityCheck,
    #[error("invalid n-gram config: {0}")]
    InvalidConfig(String),
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct NGramConfig {
    /// n-gram length (G).
    pub n: usize,
    /// Dictionary size (T).
    pub top_k: usize,
    pub min_freq: u64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        Self {
            n: 2,
            top_k: 3,
            min_freq: 2,
        }
    }
}

impl NGramConfig {
    pub fn new(n: usize, top_k: usize) -> Self {
        Self {
            n,
            top_k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AbbrevError> {
        if self.n < 2 {
            return Err(AbbrevError::InvalidConfig(format!("n = {} < 2", self.n)));
        }
        if self.top_k < 1 {
            return Err(AbbrevError::InvalidConfig("topK must be >= 1".into()));
        }
        Ok(())
    }
}

/// n-gram counts keyed by the literal n-gram text (words joined by single
/// spaces), in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrequencyHistogram {
    pub n: usize,
    pub counts: IndexMap<String, u64>,
}

impl FrequencyHistogram {
    pub fn get(&self, ngram: &str) -> u64 {
        self.counts.get(ngram).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub ph: String,
    pub ngram: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AbbrevDictionary {
    pub n: usize,
    pub top_k: usize,
    pub source_hash: String,
    pub entries: Vec<DictionaryEntry>,
}

impl AbbrevDictionary {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn lookup_placeholder(&self, ph: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.ph == ph)
            .map(|e| e.ngram.as_str())
    }

    /// Both directions of the mapping must be injective.
    pub fn validate(&self) -> Result<(), AbbrevError> {
        let mut phs = HashMap::new();
        let mut grams = HashMap::new();
        for e in &self.entries {
            if phs.insert(e.ph.as_str(), ()).is_some() {
                return Err(AbbrevError::InvalidDictionary(format!("duplicate placeholder {}", e.ph)));
            }
            if grams.insert(e.ngram.as_str(), ()).is_some() {
                return Err(AbbrevError::InvalidDictionary(format!("duplicate n-gram {:?}", e.ngram)));
            }
        }
        Ok(())
    }

    /// Human-readable legend, suitable for appending to a prompt.
    pub fn legend(&self) -> String {
        let pairs: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!("{} = {}", e.ph, e.ngram))
            .collect();
        format!("Abbreviations: {}", pairs.join("; "))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dictionary serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, AbbrevError> {
        let dict: Self = serde_json::from_str(json)
            .map_err(|e| AbbrevError::InvalidDictionary(e.to_string()))?;
        dict.validate()?;
        Ok(dict)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AbbreviatedText {
    pub text: String,
    pub dictionary: AbbrevDictionary,
}

pub fn source_hash(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

/// `i`-th placeholder: bijective base-26 letters followed by `1`.
pub fn placeholder(mut i: usize) -> String {
    let mut letters = Vec::new();
    loop {
        letters.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    letters.reverse();
    let mut s = String::from_utf8(letters).expect("ascii");
    s.push('1');
    s
}

/// Uppercase letters followed by a single digit.
pub fn is_placeholder_shaped(s: &str) -> bool {
    let bytes = s.as_bytes();
    bytes.len() >= 2
        && bytes[bytes.len() - 1].is_ascii_digit()
        && bytes[..bytes.len() - 1].iter().all(u8::is_ascii_uppercase)
}

/// Maximal runs of lexical tokens joined by exactly one ASCII space.
fn segments(stream: &TokenStream) -> Vec<Vec<&Token>> {
    let mut out = Vec::new();
    let mut current: Vec<&Token> = Vec::new();
    let mut pending_space = false;
    for t in stream.tokens() {
        match t.kind {
            TokenKind::Word | TokenKind::Number => {
                if !current.is_empty() && !pending_space {
                    out.push(std::mem::take(&mut current));
                }
                current.push(t);
                pending_space = false;
            }
            TokenKind::Whitespace if t.surface == " " && !current.is_empty() && !pending_space => {
                pending_space = true;
            }
            _ => {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                pending_space = false;
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Counts every window of `n` consecutive words (overlaps included).
///
/// Windows never cross punctuation or any whitespace other than a single space.
pub fn extract_ngrams(stream: &TokenStream, n: usize) -> FrequencyHistogram {
    let mut counts: IndexMap<String, u64> = IndexMap::new();
    if n == 0 {
        return FrequencyHistogram { n, counts };
    }
    let source = stream.source();
    for seg in segments(stream) {
        for w in seg.windows(n) {
            let text = &source[w[0].span.start..w[n - 1].span.end];
            *counts.entry(text.to_string()).or_default() += 1;
        }
    }
    FrequencyHistogram { n, counts }
}

/// Picks the `topK` most frequent n-grams (count desc, first occurrence asc)
/// with at least `minFreq` occurrences and assigns each the next placeholder
/// that does not occur in `source` and is shorter than the n-gram.
pub fn build_dictionary(
    hist: &FrequencyHistogram,
    config: &NGramConfig,
    source: &str,
) -> Result<AbbrevDictionary, AbbrevError> {
    config.validate()?;
    let mut candidates: Vec<(&String, u64)> = hist
        .counts
        .iter()
        .filter(|(_, &c)| c >= config.min_freq)
        .map(|(k, &c)| (k, c))
        .collect();
    // stable: ties keep first-occurrence order
    candidates.sort_by(|a, b| b.1.cmp(&a.1));

    let mut next_ph = 0usize;
    let mut take_placeholder = || loop {
        let ph = placeholder(next_ph);
        next_ph += 1;
        if !source.contains(&ph) {
            return ph;
        }
    };

    let mut entries = Vec::new();
    let mut pending: Option<String> = None;
    for (ngram, _) in candidates {
        if entries.len() >= config.top_k {
            break;
        }
        let ph = pending.take().unwrap_or_else(&mut take_placeholder);
        if ph.chars().count() < ngram.chars().count() {
            entries.push(DictionaryEntry {
                ph,
                ngram: ngram.clone(),
            });
        } else {
            pending = Some(ph);
        }
    }

    Ok(AbbrevDictionary {
        n: config.n,
        top_k: config.top_k,
        source_hash: source_hash(source),
        entries,
    })
}

/// Single left-to-right pass replacing dictionary n-grams at word boundaries.
pub fn abbreviate(source: &str, dict: &AbbrevDictionary) -> Result<AbbreviatedText, AbbrevError> {
    let found = source_hash(source);
    if found != dict.source_hash {
        return Err(AbbrevError::DictionaryMismatch {
            expected: dict.source_hash.clone(),
            found,
        });
    }
    dict.validate()?;
    if dict.is_empty() {
        return Ok(AbbreviatedText {
            text: source.to_string(),
            dictionary: dict.clone(),
        });
    }

    let lookup: HashMap<&str, &str> = dict
        .entries
        .iter()
        .map(|e| (e.ngram.as_str(), e.ph.as_str()))
        .collect();
    let n = dict.n.max(1);
    let stream = tokenize(source);
    let tokens = stream.tokens();
    let span = 2 * n - 1;

    let mut out = String::with_capacity(source.len());
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i].kind.is_lexical() && i + span <= tokens.len() {
            let window = &tokens[i..i + span];
            let aligned = window.iter().enumerate().all(|(j, t)| {
                if j % 2 == 0 {
                    t.kind.is_lexical()
                } else {
                    t.kind == TokenKind::Whitespace && t.surface == " "
                }
            });
            if aligned {
                let text = &source[window[0].span.start..window[span - 1].span.end];
                if let Some(ph) = lookup.get(text) {
                    out.push_str(ph);
                    i += span;
                    continue;
                }
            }
        }
        out.push_str(&tokens[i].surface);
        i += 1;
    }

    Ok(AbbreviatedText {
        text: out,
        dictionary: dict.clone(),
    })
}

/// Replaces every placeholder by its n-gram and checks the result against
/// the dictionary's source hash.
pub fn expand(abbrev: &AbbreviatedText) -> Result<String, AbbrevError> {
    expand_text(&abbrev.text, &abbrev.dictionary)
}

pub fn expand_text(text: &str, dict: &AbbrevDictionary) -> Result<String, AbbrevError> {
    dict.validate()?;
    let lookup: HashMap<&str, &str> = dict
        .entries
        .iter()
        .map(|e| (e.ph.as_str(), e.ngram.as_str()))
        .collect();
    let stream = tokenize(text);
    let mut out = String::with_capacity(text.len() * 2);
    let mut unknown: Option<&str> = None;
    for t in stream.tokens() {
        match lookup.get(t.surface.as_str()) {
            Some(ngram) if t.kind == TokenKind::Word => out.push_str(ngram),
            _ => {
                if unknown.is_none()
                    && t.kind == TokenKind::Word
                    && is_placeholder_shaped(&t.surface)
                {
                    unknown = Some(&t.surface);
                }
                out.push_str(&t.surface);
            }
        }
    }
    if source_hash(&out) != dict.source_hash {
        // Placeholder-shaped words are legitimate when they were in the
        // source; they only explain a mismatch.
        return Err(match unknown {
            Some(ph) => AbbrevError::UnknownPlaceholder(ph.to_string()),
            None => AbbrevError::IntegrityCheck,
        });
    }
    Ok(out)
}

/// Extract, build and substitute in one call.
pub fn abbreviate_document(source: &str, config: &NGramConfig) -> Result<AbbreviatedText, AbbrevError> {
    config.validate()?;
    let hist = extract_ngrams(&tokenize(source), config.n);
    let dict = build_dictionary(&hist, config, source)?;
    abbreviate(source, &dict)
}
