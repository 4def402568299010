//! Phrase grouping and budgeted phrase-level pruning.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{TokenKind, TokenStream};
use crate::scoring::ScoredToken;

pub const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

const SENTENCE_PUNCTUATION: [&str; 5] = [".", "!", "?", ";", ":"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("nothing to prune: no phrases")]
    EmptyInput,
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("token {0} belongs to a phrase but has no score")]
    UnscoredToken(usize),
}

/// A contiguous run of tokens pruned as a unit.
///
/// `token_range` indexes the [`TokenStream`] and may include interior
/// whitespace; `token_count` counts only non-whitespace members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Phrase {
    pub token_range: Range<usize>,
    pub token_count: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "camelCase")]
pub enum Budget {
    Ratio(f64),
    MaxTokens(usize),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::Ratio(0.5)
    }
}

impl Budget {
    pub fn validate(&self) -> Result<(), PruneError> {
        match *self {
            Budget::Ratio(r) if !(r > 0.0 && r <= 1.0) => Err(PruneError::InvalidBudget(format!(
                "ratio {r} outside (0, 1]"
            ))),
            Budget::MaxTokens(0) => Err(PruneError::InvalidBudget("maxTokens must be >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Token limit for a prompt of `original` tokens.
    pub fn limit(&self, original: usize) -> usize {
        match *self {
            // The epsilon keeps e.g. 0.3 * 10 from rounding up to 4.
            Budget::Ratio(r) => (r * original as f64 - 1e-9).ceil().max(0.0) as usize,
            Budget::MaxTokens(n) => n,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(*self, Budget::Ratio(r) if r >= 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrunedPrompt {
    pub kept_phrases: Vec<Phrase>,
    pub text: String,
    pub original_tokens: usize,
    pub kept_tokens: usize,
    /// Per stream token: whether it survives into `text`.
    pub kept_mask: Vec<bool>,
}

/// Splits a token stream into phrases that partition its non-whitespace tokens.
pub trait PhraseGrouper: Send + Sync {
    fn group(&self, stream: &TokenStream) -> Vec<Phrase>;
}

/// Rule-based chunker.
///
/// Sentence punctuation closes the current phrase (and belongs to it). A
/// function word that follows content starts a new phrase, so runs of
/// function words attach to the content token after them.
#[derive(Debug, Clone)]
pub struct RuleChunker {
    stopwords: HashSet<String>,
}

impl Default for RuleChunker {
    fn default() -> Self {
        Self::from_list(DEFAULT_STOPWORDS)
    }
}

impl RuleChunker {
    /// One word per line; blank lines and `#` comments are ignored.
    pub fn from_list(list: &str) -> Self {
        let stopwords = list
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { stopwords }
    }

    pub fn is_stopword(&self, word: &str) -> bool {
        self.stopwords.contains(&word.to_lowercase())
    }
}

impl PhraseGrouper for RuleChunker {
    fn group(&self, stream: &TokenStream) -> Vec<Phrase> {
        let mut phrases: Vec<Phrase> = Vec::new();
        let mut current: Option<(usize, usize, usize)> = None; // (start, last, count)
        let mut has_content = false;

        let close = |current: &mut Option<(usize, usize, usize)>, phrases: &mut Vec<Phrase>| {
            if let Some((start, last, count)) = current.take() {
                phrases.push(Phrase {
                    token_range: start..last + 1,
                    token_count: count,
                    score: 0.0,
                });
            }
        };

        for (i, token) in stream.tokens().iter().enumerate() {
            match token.kind {
                TokenKind::Whitespace => continue,
                TokenKind::Punctuation if SENTENCE_PUNCTUATION.contains(&token.surface.as_str()) => {
                    match &mut current {
                        Some((_, last, count)) => {
                            *last = i;
                            *count += 1;
                        }
                        None => match phrases.last_mut() {
                            // Attach stray terminators (e.g. "?!") to the phrase they follow.
                            Some(prev) => {
                                prev.token_range.end = i + 1;
                                prev.token_count += 1;
                                continue;
                            }
                            None => current = Some((i, i, 1)),
                        },
                    }
                    close(&mut current, &mut phrases);
                    has_content = false;
                }
                TokenKind::Word if self.is_stopword(&token.surface) => {
                    if has_content {
                        close(&mut current, &mut phrases);
                        has_content = false;
                    }
                    extend(&mut current, i);
                }
                kind => {
                    extend(&mut current, i);
                    if kind.is_lexical() {
                        has_content = true;
                    }
                }
            }
        }
        close(&mut current, &mut phrases);
        phrases
    }
}

fn extend(current: &mut Option<(usize, usize, usize)>, i: usize) {
    match current {
        Some((_, last, count)) => {
            *last = i;
            *count += 1;
        }
        None => *current = Some((i, i, 1)),
    }
}

pub fn group_phrases(stream: &TokenStream) -> Vec<Phrase> {
    RuleChunker::default().group(stream)
}

/// Fills each phrase's score with the mean combined score of its members.
pub fn score_phrases(
    stream: &TokenStream,
    scored: &[ScoredToken],
    phrases: &mut [Phrase],
) -> Result<(), PruneError> {
    let by_index: HashMap<usize, f64> = scored.iter().map(|s| (s.token_index, s.s_combined)).collect();
    for phrase in phrases.iter_mut() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in phrase.token_range.clone() {
            if stream.tokens()[i].kind == TokenKind::Whitespace {
                continue;
            }
            sum += by_index.get(&i).copied().ok_or(PruneError::UnscoredToken(i))?;
            n += 1;
        }
        phrase.score = if n == 0 { 0.0 } else { sum / n as f64 };
    }
    Ok(())
}

/// Greedy phrase selection under `budget`.
///
/// Phrases are visited in descending score (earlier phrase first on ties) and
/// kept whenever they still fit; if none fits, the top phrase alone is kept.
/// Returns indices into `phrases`, ascending.
pub fn select_phrases(phrases: &[Phrase], limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..phrases.len()).collect();
    order.sort_by(|&a, &b| phrases[b].score.total_cmp(&phrases[a].score).then(a.cmp(&b)));

    let mut used = 0;
    let mut chosen = Vec::new();
    for &i in &order {
        let size = phrases[i].token_count;
        if used + size <= limit {
            used += size;
            chosen.push(i);
        }
    }
    if chosen.is_empty() {
        if let Some(&top) = order.first() {
            chosen.push(top);
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn prune(
    stream: &TokenStream,
    scored: &[ScoredToken],
    phrases: &[Phrase],
    budget: Budget,
) -> Result<PrunedPrompt, PruneError> {
    budget.validate()?;
    if phrases.is_empty() {
        return Err(PruneError::EmptyInput);
    }
    let mut phrases = phrases.to_vec();
    score_phrases(stream, scored, &mut phrases)?;

    let original_tokens = stream.content_len();
    let chosen = select_phrases(&phrases, budget.limit(original_tokens));

    let mut kept_mask = vec![false; stream.len()];
    for &p in &chosen {
        for i in phrases[p].token_range.clone() {
            kept_mask[i] = true;
        }
    }
    // Non-phrase tokens (never expected from a well-formed grouper) and
    // whitespace inside dropped phrases are decided below.
    for (i, t) in stream.tokens().iter().enumerate() {
        if t.kind == TokenKind::Whitespace {
            kept_mask[i] = false;
        }
    }
    let kept_tokens = kept_mask.iter().filter(|k| **k).count();
    apply_whitespace_rule(stream, &mut kept_mask);

    Ok(PrunedPrompt {
        kept_phrases: chosen.iter().map(|&p| phrases[p].clone()).collect(),
        text: reassemble(stream, &kept_mask),
        original_tokens,
        kept_tokens,
        kept_mask,
    })
}

/// Whitespace follows the fate of the token before it, and is dropped when
/// nothing kept follows (except trailing whitespace of the source).
fn apply_whitespace_rule(stream: &TokenStream, kept: &mut [bool]) {
    let tokens = stream.tokens();
    let mut kept_after = vec![false; tokens.len() + 1];
    for i in (0..tokens.len()).rev() {
        kept_after[i] = kept_after[i + 1] || (tokens[i].kind != TokenKind::Whitespace && kept[i]);
    }
    let mut prev_content: Option<usize> = None;
    for i in 0..tokens.len() {
        if tokens[i].kind != TokenKind::Whitespace {
            prev_content = Some(i);
            continue;
        }
        let prev_kept = prev_content.map_or(true, |p| kept[p]);
        let trailing = !tokens[i + 1..].iter().any(|t| t.kind != TokenKind::Whitespace);
        kept[i] = prev_kept && (kept_after[i + 1] || (trailing && prev_content.is_some()));
    }
}

/// Concatenates kept tokens; a single space separates kept tokens that were
/// not adjacent and would otherwise touch.
fn reassemble(stream: &TokenStream, kept: &[bool]) -> String {
    let mut out = String::with_capacity(stream.source().len());
    let mut last: Option<usize> = None;
    for (i, t) in stream.tokens().iter().enumerate() {
        if !kept[i] {
            continue;
        }
        if let Some(l) = last {
            let prev = &stream.tokens()[l];
            if l + 1 != i && prev.kind != TokenKind::Whitespace && t.kind != TokenKind::Whitespace {
                out.push(' ');
            }
        }
        out.push_str(&t.surface);
        last = Some(i);
    }
    out
}
