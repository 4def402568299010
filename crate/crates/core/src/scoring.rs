//! Dynamic self-information and the static/dynamic combination rule.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{tokenize, FrequencyModel, TokenKind, TokenStream};

/// Relative-difference threshold below which static and dynamic scores are averaged.
pub const DEFAULT_AGREEMENT_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("probability provider failed at token {position}: {message}")]
    ProviderFailure { position: usize, message: String },
}

/// Error raised by a provider for a single query; [`score_stream`] attaches the position.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct ProviderError(pub String);

/// Source of `P(token | context)`.
///
/// Implementations must return a probability in `(0, 1]` and be deterministic
/// for identical inputs within one session.
pub trait ProbabilityProvider: Send + Sync {
    fn probability(&self, context: &[&str], token: &str) -> Result<f64, ProviderError>;

    fn name(&self) -> &str {
        "provider"
    }

    fn is_reachable(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScoredToken {
    pub token_index: usize,
    pub s_stat: f64,
    pub s_dyn: f64,
    pub s_combined: f64,
}

/// Bigram model with add-one smoothing and unigram backoff, built offline from a corpus.
///
/// With a known predecessor `w`, `P(t | w) = (c(w t) + 1) / (c(w ·) + V + 1)` where
/// `c(w ·)` counts bigrams starting with `w`. Without context, or when `w` never
/// starts a bigram, the smoothed unigram `(c(t) + 1) / (N + V + 1)` is used.
#[derive(Debug, Clone)]
pub struct FallbackBigramProvider {
    unigrams: HashMap<String, u64>,
    bigrams: HashMap<(String, String), u64>,
    prefix_totals: HashMap<String, u64>,
    total: u64,
}

impl FallbackBigramProvider {
    pub fn from_corpus<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut unigrams: HashMap<String, u64> = HashMap::new();
        let mut bigrams: HashMap<(String, String), u64> = HashMap::new();
        let mut prefix_totals: HashMap<String, u64> = HashMap::new();
        let mut total = 0;
        for doc in corpus {
            let stream = tokenize(doc.as_ref());
            let words: Vec<&str> = stream
                .tokens()
                .iter()
                .filter(|t| t.kind != TokenKind::Whitespace)
                .map(|t| t.surface.as_str())
                .collect();
            for w in &words {
                *unigrams.entry((*w).to_string()).or_default() += 1;
                total += 1;
            }
            for pair in words.windows(2) {
                *bigrams
                    .entry((pair[0].to_string(), pair[1].to_string()))
                    .or_default() += 1;
                *prefix_totals.entry(pair[0].to_string()).or_default() += 1;
            }
        }
        Self {
            unigrams,
            bigrams,
            prefix_totals,
            total,
        }
    }

    pub fn from_model(model: &FrequencyModel) -> Self {
        Self {
            unigrams: model.counts().iter().map(|(k, v)| (k.clone(), *v)).collect(),
            bigrams: HashMap::new(),
            prefix_totals: HashMap::new(),
            total: model.total(),
        }
    }

    fn vocab(&self) -> f64 {
        self.unigrams.len() as f64
    }

    fn unigram(&self, token: &str) -> f64 {
        let c = self.unigrams.get(token).copied().unwrap_or(0) as f64;
        (c + 1.0) / (self.total as f64 + self.vocab() + 1.0)
    }
}

impl ProbabilityProvider for FallbackBigramProvider {
    fn probability(&self, context: &[&str], token: &str) -> Result<f64, ProviderError> {
        let Some(prev) = context.last() else {
            return Ok(self.unigram(token));
        };
        match self.prefix_totals.get(*prev) {
            Some(&prefix) => {
                let pair = self
                    .bigrams
                    .get(&(prev.to_string(), token.to_string()))
                    .copied()
                    .unwrap_or(0) as f64;
                Ok((pair + 1.0) / (prefix as f64 + self.vocab() + 1.0))
            }
            None => Ok(self.unigram(token)),
        }
    }

    fn name(&self) -> &str {
        "fallback-bigram"
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    context: &'a [&'a str],
    token: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    p: f64,
}

/// Provider backed by an HTTP endpoint speaking `{context, token}` → `{p}`.
///
/// No retries: any transport or contract failure surfaces as an error.
pub struct RemoteProvider {
    endpoint: String,
    auth_token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteProvider {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

    pub fn new(endpoint: impl Into<String>, auth_token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            auth_token,
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl ProbabilityProvider for RemoteProvider {
    fn probability(&self, context: &[&str], token: &str) -> Result<f64, ProviderError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(auth) = &self.auth_token {
            req = req.header("Authorization", &format!("Bearer {auth}"));
        }
        let body: RemoteResponse = req
            .send_json(RemoteRequest { context, token })
            .map_err(|e| ProviderError(format!("{}: {e}", self.endpoint)))?
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError(format!("{}: bad response: {e}", self.endpoint)))?;
        if !(body.p > 0.0 && body.p <= 1.0) {
            return Err(ProviderError(format!(
                "{}: probability {} outside (0, 1]",
                self.endpoint, body.p
            )));
        }
        Ok(body.p)
    }

    fn name(&self) -> &str {
        "remote"
    }

    /// Liveness probe: one scoring request for a fixed token.
    fn is_reachable(&self) -> bool {
        self.probability(&[], "ping").is_ok()
    }
}

pub fn dynamic_self_information(
    provider: &dyn ProbabilityProvider,
    context: &[&str],
    token: &str,
) -> Result<f64, ProviderError> {
    let p = provider.probability(context, token)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(ProviderError(format!(
            "{} returned probability {p} outside (0, 1]",
            provider.name()
        )));
    }
    // -log2(1) is -0.0; normalize the sign.
    Ok((-p.log2()).max(0.0))
}

/// Combination rule with the default 10% agreement threshold.
pub fn combine_scores(s_stat: f64, s_dyn: f64) -> f64 {
    combine_scores_with(s_stat, s_dyn, DEFAULT_AGREEMENT_THRESHOLD)
}

/// Mean of the two scores when their relative difference (w.r.t. the static
/// score) is at most `threshold`, otherwise the dynamic score. A zero static
/// score is treated as infinite disagreement.
pub fn combine_scores_with(s_stat: f64, s_dyn: f64, threshold: f64) -> f64 {
    if s_stat == 0.0 {
        return s_dyn;
    }
    let delta = (s_dyn - s_stat).abs() / s_stat;
    if delta <= threshold {
        (s_stat + s_dyn) / 2.0
    } else {
        s_dyn
    }
}

/// Scores every non-whitespace token of `stream`.
///
/// The dynamic context of a token is the full sequence of preceding
/// non-whitespace tokens.
pub fn score_stream(
    stream: &TokenStream,
    model: &FrequencyModel,
    provider: &dyn ProbabilityProvider,
) -> Result<Vec<ScoredToken>, ScoringError> {
    score_stream_with(stream, model, provider, DEFAULT_AGREEMENT_THRESHOLD)
}

pub fn score_stream_with(
    stream: &TokenStream,
    model: &FrequencyModel,
    provider: &dyn ProbabilityProvider,
    threshold: f64,
) -> Result<Vec<ScoredToken>, ScoringError> {
    let mut context: Vec<&str> = Vec::new();
    let mut scored = Vec::new();
    for (index, token) in stream.tokens().iter().enumerate() {
        if token.kind == TokenKind::Whitespace {
            continue;
        }
        let s_stat = model.self_information(&token.surface);
        let s_dyn = dynamic_self_information(provider, &context, &token.surface).map_err(|e| {
            ScoringError::ProviderFailure {
                position: index,
                message: e.0,
            }
        })?;
        scored.push(ScoredToken {
            token_index: index,
            s_stat,
            s_dyn,
            s_combined: combine_scores_with(s_stat, s_dyn, threshold),
        });
        context.push(&token.surface);
    }
    Ok(scored)
}
