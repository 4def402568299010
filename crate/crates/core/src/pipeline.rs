//! End-to-end orchestration over a prompt, its attachments and an optional
//! exemplar pool.
//!
//! A run goes through eight stages, timed individually: initialization,
//! token probability construction, hybrid scoring, compression, semantic
//! similarity, metrics, result assembly and utility (final prompt assembly
//! and serialization check).

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abbreviation::{abbreviate_document, expand_text, source_hash, AbbrevDictionary, NGramConfig};
use crate::cost::{default_price_table, estimate_cost, PriceTable, DEFAULT_MODEL};
use crate::embedding::{EmbeddingProvider, HashingEmbedder, RemoteEmbedder, HASHING_DIMENSION};
use crate::exemplars::{random_exemplars, representative_exemplars, Exemplar, ExemplarError};
use crate::fidelity::{similarity_report, FidelityError, SimilarityReport, DEFAULT_WARNING_THRESHOLD};
use crate::lexicon::{count_tokens, split_corpus, tokenize, FrequencyModel, TokenKind};
use crate::pruning::{prune, score_phrases, Budget, PhraseGrouper, RuleChunker, DEFAULT_STOPWORDS};
use crate::scoring::{
    score_stream_with, FallbackBigramProvider, ProbabilityProvider, RemoteProvider, ScoredToken,
    ScoringError, DEFAULT_AGREEMENT_THRESHOLD,
};
use crate::table::{quantize_table, reconstruct_table, QuantConfig, Table, TableSidecar};

pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

const SCORE_CACHE_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Initialization,
    TokenProbability,
    HybridScoring,
    Compression,
    SemanticSimilarity,
    Metrics,
    ResultAssembly,
    Utility,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Initialization,
        Stage::TokenProbability,
        Stage::HybridScoring,
        Stage::Compression,
        Stage::SemanticSimilarity,
        Stage::Metrics,
        Stage::ResultAssembly,
        Stage::Utility,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initialization => "initialization",
            Stage::TokenProbability => "token-probability",
            Stage::HybridScoring => "hybrid-scoring",
            Stage::Compression => "compression",
            Stage::SemanticSimilarity => "semantic-similarity",
            Stage::Metrics => "metrics",
            Stage::ResultAssembly => "result-assembly",
            Stage::Utility => "utility",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum FailureKind {
    Config,
    Data,
    Provider,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{stage} stage failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: Stage, kind: FailureKind, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
        }
    }

    fn config(message: impl fmt::Display) -> Self {
        Self::new(Stage::Initialization, FailureKind::Config, message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ScorerKind {
    #[default]
    Fallback,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub endpoint: Option<String>,
    pub token: Option<String>,
    pub timeout_secs: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Fallback,
            endpoint: None,
            token: None,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EmbedderKind {
    #[default]
    Hashing,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub endpoint: Option<String>,
    pub token: Option<String>,
    pub dimension: usize,
    pub timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hashing,
            endpoint: None,
            token: None,
            dimension: HASHING_DIMENSION,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ProvidersConfig {
    pub scorer: ScorerConfig,
    pub embedder: EmbedderConfig,
    /// Corpus for the static frequency model and the fallback scorer.
    pub corpus_path: Option<PathBuf>,
    pub stopwords_path: Option<PathBuf>,
}

impl ProvidersConfig {
    /// `SCORER_ENDPOINT`, `SCORER_TOKEN` and `EMBEDDER_ENDPOINT` override the file config.
    pub fn apply_env(&mut self) {
        self.apply_overrides(
            std::env::var("SCORER_ENDPOINT").ok(),
            std::env::var("SCORER_TOKEN").ok(),
            std::env::var("EMBEDDER_ENDPOINT").ok(),
        );
    }

    pub fn apply_overrides(
        &mut self,
        scorer_endpoint: Option<String>,
        scorer_token: Option<String>,
        embedder_endpoint: Option<String>,
    ) {
        if let Some(e) = scorer_endpoint.filter(|e| !e.is_empty()) {
            self.scorer.kind = ScorerKind::Remote;
            self.scorer.endpoint = Some(e);
        }
        if let Some(t) = scorer_token.filter(|t| !t.is_empty()) {
            self.scorer.token = Some(t);
        }
        if let Some(e) = embedder_endpoint.filter(|e| !e.is_empty()) {
            self.embedder.kind = EmbedderKind::Remote;
            self.embedder.endpoint = Some(e);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ExemplarMode {
    #[default]
    Off,
    Random,
    Representative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExemplarConfig {
    pub mode: ExemplarMode,
    pub count: usize,
    pub seed: u64,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        Self {
            mode: ExemplarMode::Off,
            count: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PipelineConfig {
    pub budget: Budget,
    pub agreement_threshold: f64,
    /// n-gram abbreviation of text attachments.
    pub abbreviation: bool,
    pub ngram: NGramConfig,
    pub quant: QuantConfig,
    pub exemplar: ExemplarConfig,
    pub append_dictionary_as_context: bool,
    pub providers: ProvidersConfig,
    pub model: String,
    pub price_table: PriceTable,
    pub fidelity_warning: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Ratio(0.5),
            agreement_threshold: DEFAULT_AGREEMENT_THRESHOLD,
            abbreviation: true,
            ngram: NGramConfig::default(),
            quant: QuantConfig::default(),
            exemplar: ExemplarConfig::default(),
            append_dictionary_as_context: false,
            providers: ProvidersConfig::default(),
            model: DEFAULT_MODEL.to_string(),
            price_table: default_price_table(),
            fidelity_warning: DEFAULT_WARNING_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    /// Keeps the whole prompt, no abbreviation, no quantization.
    pub fn identity() -> Self {
        let mut c = Self {
            budget: Budget::Ratio(1.0),
            abbreviation: false,
            ..Self::default()
        };
        c.quant.mode = crate::table::QuantMode::Off;
        c
    }

    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        let c: Self = serde_json::from_str(json).map_err(PipelineError::config)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.budget.validate().map_err(PipelineError::config)?;
        if self.abbreviation {
            self.ngram.validate().map_err(PipelineError::config)?;
        }
        if !(self.agreement_threshold >= 0.0) {
            return Err(PipelineError::config("agreementThreshold must be >= 0"));
        }
        if self.quant.mode == crate::table::QuantMode::Uniform && self.quant.tolerance.is_none() && !(1..=16).contains(&self.quant.bits) {
            return Err(PipelineError::config(format!("bits {} outside 1..=16", self.quant.bits)));
        }
        if let Some(t) = self.quant.tolerance {
            if !(t > 0.0) {
                return Err(PipelineError::config("tolerance must be positive"));
            }
        }
        if self.quant.mode == crate::table::QuantMode::Kmeans && self.quant.k == 0 {
            return Err(PipelineError::config("k must be >= 1"));
        }
        if !self.price_table.contains_key(&self.model) {
            return Err(PipelineError::config(format!("model {:?} is not in the price table", self.model)));
        }
        if self.providers.scorer.kind == ScorerKind::Remote && self.providers.scorer.endpoint.is_none() {
            return Err(PipelineError::config("remote scorer needs an endpoint"));
        }
        if self.providers.embedder.kind == EmbedderKind::Remote && self.providers.embedder.endpoint.is_none() {
            return Err(PipelineError::config("remote embedder needs an endpoint"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AttachmentKind {
    TextDocument,
    Table,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub name: String,
    pub kind: AttachmentKind,
    pub content: String,
}

impl Attachment {
    pub fn text(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: AttachmentKind::TextDocument,
            content: content.into(),
        }
    }

    pub fn table(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: AttachmentKind::Table,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PipelineInput {
    pub prompt: String,
    pub attachments: Vec<Attachment>,
    /// Candidate few-shot examples; only used when exemplar selection is on.
    pub exemplar_pool: Vec<String>,
}

impl PipelineInput {
    pub fn new(prompt: impl Into<String>, attachments: Vec<Attachment>) -> Self {
        Self {
            prompt: prompt.into(),
            attachments,
            exemplar_pool: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SectionCounts {
    pub original: usize,
    pub compressed: usize,
}

impl SectionCounts {
    pub fn ratio(&self) -> f64 {
        ratio(self.original, self.compressed)
    }

    fn add(&mut self, original: usize, compressed: usize) {
        self.original += original;
        self.compressed += compressed;
    }
}

fn ratio(original: usize, compressed: usize) -> f64 {
    if compressed == 0 {
        1.0
    } else {
        original as f64 / compressed as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageTiming {
    pub stage: Stage,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDictionary {
    pub attachment: String,
    #[serde(flatten)]
    pub dictionary: AbbrevDictionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedQuant {
    pub attachment: String,
    #[serde(flatten)]
    pub sidecar: TableSidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompressionReport {
    pub original_tokens: usize,
    pub compressed_tokens: usize,
    pub ratio: f64,
    pub prompt: SectionCounts,
    pub text_attachments: SectionCounts,
    pub tables: SectionCounts,
    pub exemplars: SectionCounts,
    /// Tokens added by the dictionary legend.
    pub context: SectionCounts,
    pub original_chars: usize,
    pub compressed_chars: usize,
    pub model: String,
    pub original_cost: f64,
    pub compressed_cost: f64,
    pub est_savings: f64,
    pub fidelity: Option<SimilarityReport>,
    pub fidelity_warning: bool,
    pub dictionary: Vec<NamedDictionary>,
    pub selected_exemplars: Vec<Exemplar>,
    pub stage_timings: Vec<StageTiming>,
}

impl CompressionReport {
    /// Copy without wall-clock data, for equality checks across runs.
    pub fn without_timings(&self) -> Self {
        Self {
            stage_timings: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedAttachment {
    pub name: String,
    pub kind: AttachmentKind,
    pub content: String,
}

/// JSON envelope of a run: `{compressedPrompt, attachments, dictionary, quantParams, report}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Bundle {
    pub compressed_prompt: String,
    pub attachments: Vec<CompressedAttachment>,
    pub dictionary: Vec<NamedDictionary>,
    pub quant_params: Vec<NamedQuant>,
    pub report: CompressionReport,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RestoreError {
    #[error("no attachment named {0:?}")]
    UnknownAttachment(String),
    #[error(transparent)]
    Abbreviation(#[from] crate::abbreviation::AbbrevError),
    #[error(transparent)]
    Quantization(#[from] crate::quantization::QuantError),
}

impl Bundle {
    /// Original bytes of a text attachment, or the dequantized table as CSV.
    pub fn restore_attachment(&self, name: &str) -> Result<String, RestoreError> {
        let att = self
            .attachments
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| RestoreError::UnknownAttachment(name.to_string()))?;
        match att.kind {
            AttachmentKind::TextDocument => match self.dictionary.iter().find(|d| d.attachment == name) {
                Some(d) => Ok(expand_text(&att.content, &d.dictionary)?),
                None => Ok(att.content.clone()),
            },
            AttachmentKind::Table => match self.quant_params.iter().find(|q| q.attachment == name) {
                Some(q) => Ok(reconstruct_table(&att.content, &q.sidecar)?.to_csv()),
                None => Ok(att.content.clone()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenDetail {
    pub index: usize,
    pub surface: String,
    pub kind: TokenKind,
    pub s_stat: Option<f64>,
    pub s_dyn: Option<f64>,
    pub s_combined: Option<f64>,
    pub phrase_id: Option<usize>,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineOutput {
    pub bundle: Bundle,
    pub token_detail: Vec<TokenDetail>,
}

/// Shared, immutable-after-construction resources of a pipeline.
struct Resources {
    providers: ProvidersConfig,
    model: FrequencyModel,
    scorer: Box<dyn ProbabilityProvider>,
    embedder: Box<dyn EmbeddingProvider>,
    chunker: RuleChunker,
    score_cache: RwLock<HashMap<String, Arc<Vec<ScoredToken>>>>,
}

impl Resources {
    fn load(providers: &ProvidersConfig) -> Result<Self, PipelineError> {
        let corpus_text = match &providers.corpus_path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| PipelineError::config(format!("corpus {}: {e}", p.display())))?,
            None => BUNDLED_CORPUS.to_string(),
        };
        let corpus = split_corpus(&corpus_text);
        let model = FrequencyModel::build(&corpus).map_err(PipelineError::config)?;

        let scorer: Box<dyn ProbabilityProvider> = match providers.scorer.kind {
            ScorerKind::Fallback => Box::new(FallbackBigramProvider::from_corpus(&corpus)),
            ScorerKind::Remote => Box::new(RemoteProvider::new(
                providers.scorer.endpoint.clone().unwrap_or_default(),
                providers.scorer.token.clone(),
                Duration::from_secs(providers.scorer.timeout_secs),
            )),
        };
        let embedder: Box<dyn EmbeddingProvider> = match providers.embedder.kind {
            EmbedderKind::Hashing => Box::new(HashingEmbedder::with_dimension(providers.embedder.dimension.max(1))),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                providers.embedder.endpoint.clone().unwrap_or_default(),
                providers.embedder.token.clone(),
                providers.embedder.dimension,
                Duration::from_secs(providers.embedder.timeout_secs),
            )),
        };
        let chunker = match &providers.stopwords_path {
            Some(p) => RuleChunker::from_list(
                &std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::config(format!("stopwords {}: {e}", p.display())))?,
            ),
            None => RuleChunker::from_list(DEFAULT_STOPWORDS),
        };
        Ok(Self {
            providers: providers.clone(),
            model,
            scorer,
            embedder,
            chunker,
            score_cache: RwLock::new(HashMap::new()),
        })
    }

    fn scores(&self, prompt: &str, threshold: f64) -> Result<Arc<Vec<ScoredToken>>, ScoringError> {
        let key = format!("{}:{:x}", source_hash(prompt), threshold.to_bits());
        if let Some(hit) = self.score_cache.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(hit));
        }
        let scored = Arc::new(score_stream_with(
            &tokenize(prompt),
            &self.model,
            self.scorer.as_ref(),
            threshold,
        )?);
        let mut cache = self.score_cache.write().expect("cache lock");
        if cache.len() >= SCORE_CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&scored));
        Ok(scored)
    }
}

/// Reachability of the configured providers (fallbacks are always reachable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderHealth {
    pub scorer: bool,
    pub embedder: bool,
}

#[derive(Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    resources: Arc<Resources>,
    init_time: Duration,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Stage 1: validates the config and loads corpus, providers and stopwords.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let start = Instant::now();
        config.validate()?;
        let resources = Arc::new(Resources::load(&config.providers)?);
        Ok(Self {
            config,
            resources,
            init_time: start.elapsed(),
        })
    }

    /// Same pipeline with a different config; resources are shared when the
    /// provider settings are unchanged.
    pub fn with_config(&self, config: PipelineConfig) -> Result<Self, PipelineError> {
        if config.providers != self.resources.providers {
            return Self::new(config);
        }
        let start = Instant::now();
        config.validate()?;
        Ok(Self {
            config,
            resources: Arc::clone(&self.resources),
            init_time: start.elapsed(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn frequency_model(&self) -> &FrequencyModel {
        &self.resources.model
    }

    pub fn provider_health(&self) -> ProviderHealth {
        ProviderHealth {
            scorer: self.resources.scorer.is_reachable(),
            embedder: self.resources.embedder.is_reachable(),
        }
    }

    pub fn run(&self, input: &PipelineInput) -> Result<PipelineOutput, PipelineError> {
        let config = &self.config;
        let res = &self.resources;
        let mut timings = vec![StageTiming {
            stage: Stage::Initialization,
            millis: self.init_time.as_secs_f64() * 1e3,
        }];
        let mut clock = Instant::now();
        let mut lap = |stage: Stage, timings: &mut Vec<StageTiming>| {
            timings.push(StageTiming {
                stage,
                millis: clock.elapsed().as_secs_f64() * 1e3,
            });
            clock = Instant::now();
        };

        // 2. token probabilities (static + dynamic self-information)
        let stream = tokenize(&input.prompt);
        let scored = res
            .scores(&input.prompt, config.agreement_threshold)
            .map_err(|e| PipelineError::new(Stage::TokenProbability, FailureKind::Provider, e))?;
        lap(Stage::TokenProbability, &mut timings);

        // 3. hybrid scoring at phrase level
        let mut phrases = res.chunker.group(&stream);
        score_phrases(&stream, &scored, &mut phrases)
            .map_err(|e| PipelineError::new(Stage::HybridScoring, FailureKind::Data, e))?;
        lap(Stage::HybridScoring, &mut timings);

        // 4. compression engine
        let fail = |kind, e: &dyn fmt::Display| PipelineError::new(Stage::Compression, kind, e);
        let (pruned_text, kept_mask) = if phrases.is_empty() {
            (input.prompt.clone(), vec![true; stream.len()])
        } else {
            let p = prune(&stream, &scored, &phrases, config.budget).map_err(|e| fail(FailureKind::Data, &e))?;
            (p.text, p.kept_mask)
        };

        let mut attachments = Vec::with_capacity(input.attachments.len());
        let mut dictionaries = Vec::new();
        let mut quant_params = Vec::new();
        for att in &input.attachments {
            match att.kind {
                AttachmentKind::TextDocument => {
                    let content = if config.abbreviation {
                        let a = abbreviate_document(&att.content, &config.ngram)
                            .map_err(|e| fail(FailureKind::Data, &format!("{}: {e}", att.name)))?;
                        let text = a.text;
                        dictionaries.push(NamedDictionary {
                            attachment: att.name.clone(),
                            dictionary: a.dictionary,
                        });
                        text
                    } else {
                        att.content.clone()
                    };
                    attachments.push(CompressedAttachment {
                        name: att.name.clone(),
                        kind: att.kind,
                        content,
                    });
                }
                AttachmentKind::Table => {
                    let table = Table::parse(&att.content)
                        .map_err(|e| fail(FailureKind::Data, &format!("{}: {e}", att.name)))?;
                    let q = quantize_table(&table, &config.quant)
                        .map_err(|e| fail(FailureKind::Data, &format!("{}: {e}", att.name)))?;
                    let content = if q.sidecar.columns.is_empty() {
                        att.content.clone()
                    } else {
                        q.render(config.quant.render)
                            .map_err(|e| fail(FailureKind::Data, &format!("{}: {e}", att.name)))?
                    };
                    if !q.sidecar.columns.is_empty() {
                        quant_params.push(NamedQuant {
                            attachment: att.name.clone(),
                            sidecar: q.sidecar,
                        });
                    }
                    attachments.push(CompressedAttachment {
                        name: att.name.clone(),
                        kind: att.kind,
                        content,
                    });
                }
            }
        }

        let exemplars = match config.exemplar.mode {
            ExemplarMode::Off => Vec::new(),
            ExemplarMode::Random => random_exemplars(&input.exemplar_pool, config.exemplar.count, config.exemplar.seed),
            ExemplarMode::Representative => representative_exemplars(
                &input.exemplar_pool,
                config.exemplar.count,
                res.embedder.as_ref(),
                config.exemplar.seed,
            )
            .map_err(|e| match e {
                ExemplarError::Embedding(_) => fail(FailureKind::Provider, &e),
                _ => fail(FailureKind::Data, &e),
            })?,
        };
        let exemplar_block = exemplars.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join("\n\n");
        let legend = if config.append_dictionary_as_context {
            dictionaries
                .iter()
                .filter(|d| !d.dictionary.is_empty())
                .map(|d| format!("[{}] {}", d.attachment, d.dictionary.legend()))
                .collect::<Vec<_>>()
                .join("\n")
        } else {
            String::new()
        };
        lap(Stage::Compression, &mut timings);

        // 5. semantic similarity
        let mut pairs = Vec::new();
        if count_tokens(&input.prompt) > 0 && count_tokens(&pruned_text) > 0 {
            pairs.push(("prompt".to_string(), input.prompt.clone(), pruned_text.clone()));
        }
        for (orig, comp) in input.attachments.iter().zip(&attachments) {
            if orig.kind == AttachmentKind::TextDocument
                && count_tokens(&orig.content) > 0
                && count_tokens(&comp.content) > 0
            {
                pairs.push((orig.name.clone(), orig.content.clone(), comp.content.clone()));
            }
        }
        let fidelity = if pairs.is_empty() {
            None
        } else {
            Some(similarity_report(&pairs, res.embedder.as_ref()).map_err(|e| {
                let kind = match e {
                    FidelityError::Embedding { .. } => FailureKind::Provider,
                    _ => FailureKind::Data,
                };
                PipelineError::new(Stage::SemanticSimilarity, kind, e)
            })?)
        };
        lap(Stage::SemanticSimilarity, &mut timings);

        // 6. metrics
        let mut prompt_counts = SectionCounts::default();
        prompt_counts.add(stream.content_len(), count_tokens(&pruned_text));
        let mut exemplar_counts = SectionCounts::default();
        if config.exemplar.mode != ExemplarMode::Off {
            exemplar_counts.add(
                input.exemplar_pool.iter().map(|t| count_tokens(t)).sum(),
                count_tokens(&exemplar_block),
            );
        }
        let mut context_counts = SectionCounts::default();
        context_counts.add(0, count_tokens(&legend));
        let mut text_counts = SectionCounts::default();
        let mut table_counts = SectionCounts::default();
        for (orig, comp) in input.attachments.iter().zip(&attachments) {
            let section = match orig.kind {
                AttachmentKind::TextDocument => &mut text_counts,
                AttachmentKind::Table => &mut table_counts,
            };
            section.add(count_tokens(&orig.content), count_tokens(&comp.content));
        }
        let original_tokens = prompt_counts.original
            + exemplar_counts.original
            + text_counts.original
            + table_counts.original;
        let compressed_prompt = [exemplar_block.as_str(), pruned_text.as_str(), legend.as_str()]
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>();
        let compressed_prompt_tokens: usize = compressed_prompt.iter().map(|s| count_tokens(s)).sum();
        let compressed_tokens =
            compressed_prompt_tokens + text_counts.compressed + table_counts.compressed;
        let metrics_err = |e: crate::cost::UnknownModel| PipelineError::new(Stage::Metrics, FailureKind::Config, e);
        let original_cost = estimate_cost(original_tokens, &config.model, &config.price_table).map_err(metrics_err)?;
        let compressed_cost = estimate_cost(compressed_tokens, &config.model, &config.price_table).map_err(metrics_err)?;
        let original_chars = input.prompt.chars().count()
            + input.attachments.iter().map(|a| a.content.chars().count()).sum::<usize>()
            + if config.exemplar.mode != ExemplarMode::Off {
                input.exemplar_pool.iter().map(|t| t.chars().count()).sum::<usize>()
            } else {
                0
            };
        let compressed_chars = compressed_prompt.iter().map(|s| s.chars().count()).sum::<usize>()
            + attachments.iter().map(|a| a.content.chars().count()).sum::<usize>();
        lap(Stage::Metrics, &mut timings);

        // 7. result assembly
        let fidelity_warning = fidelity.as_ref().is_some_and(|f| f.below(config.fidelity_warning));
        let report = CompressionReport {
            original_tokens,
            compressed_tokens,
            ratio: ratio(original_tokens, compressed_tokens),
            prompt: prompt_counts,
            text_attachments: text_counts,
            tables: table_counts,
            exemplars: exemplar_counts,
            context: context_counts,
            original_chars,
            compressed_chars,
            model: config.model.clone(),
            original_cost,
            compressed_cost,
            est_savings: original_cost - compressed_cost,
            fidelity,
            fidelity_warning,
            dictionary: dictionaries.clone(),
            selected_exemplars: exemplars,
            stage_timings: Vec::new(),
        };

        let mut phrase_of = vec![None; stream.len()];
        for (pid, p) in phrases.iter().enumerate() {
            for i in p.token_range.clone() {
                if stream.tokens()[i].kind != TokenKind::Whitespace {
                    phrase_of[i] = Some(pid);
                }
            }
        }
        let mut score_of: Vec<Option<&ScoredToken>> = vec![None; stream.len()];
        for s in scored.iter() {
            score_of[s.token_index] = Some(s);
        }
        let token_detail = stream
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| TokenDetail {
                index: i,
                surface: t.surface.clone(),
                kind: t.kind,
                s_stat: score_of[i].map(|s| s.s_stat),
                s_dyn: score_of[i].map(|s| s.s_dyn),
                s_combined: score_of[i].map(|s| s.s_combined),
                phrase_id: phrase_of[i],
                kept: kept_mask[i],
            })
            .collect();
        let mut bundle = Bundle {
            compressed_prompt: String::new(),
            attachments,
            dictionary: dictionaries,
            quant_params,
            report,
        };
        lap(Stage::ResultAssembly, &mut timings);

        // 8. utility: final prompt text (exemplars, pruned prompt, legend) and a
        // serialization check so callers never get an unserializable bundle.
        bundle.compressed_prompt = compressed_prompt.join("\n\n");
        serde_json::to_string(&bundle).map_err(|e| PipelineError::new(Stage::Utility, FailureKind::Data, e))?;
        lap(Stage::Utility, &mut timings);

        bundle.report.stage_timings = timings;
        Ok(PipelineOutput { bundle, token_detail })
    }
}

/// One-shot run with a fresh pipeline.
pub fn run_pipeline(
    prompt: &str,
    attachments: &[Attachment],
    config: &PipelineConfig,
) -> Result<(Bundle, CompressionReport), PipelineError> {
    let out = Pipeline::new(config.clone())?.run(&PipelineInput::new(prompt, attachments.to_vec()))?;
    let report = out.bundle.report.clone();
    Ok((out.bundle, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridCell {
    pub t: usize,
    pub g: usize,
    pub report: CompressionReport,
}

/// One full run per `(T, G)` pair with abbreviation switched on; T-major order.
pub fn ablation_grid(
    pipeline: &Pipeline,
    input: &PipelineInput,
    t_grid: &[usize],
    g_grid: &[usize],
) -> Result<Vec<GridCell>, PipelineError> {
    if t_grid.is_empty() || g_grid.is_empty() {
        return Err(PipelineError::config("grid axes must be non-empty"));
    }
    let mut cells = Vec::with_capacity(t_grid.len() * g_grid.len());
    for &t in t_grid {
        for &g in g_grid {
            let mut config = pipeline.config().clone();
            config.abbreviation = true;
            config.ngram.top_k = t;
            config.ngram.n = g;
            let out = pipeline.with_config(config)?.run(input)?;
            cells.push(GridCell {
                t,
                g,
                report: out.bundle.report,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples;

    #[test]
    fn identity_config_is_a_no_op() {
        let prompt = "  Keep every word here.\nAnd this too!  ";
        let atts = [Attachment::text("notes.txt", "net income and net income"), Attachment::table("t.csv", "a,b\n1.25,x\n")];
        let (bundle, report) = run_pipeline(prompt, &atts, &PipelineConfig::identity()).unwrap();
        assert_eq!(bundle.compressed_prompt, prompt);
        assert_eq!(bundle.attachments[0].content, atts[0].content);
        assert_eq!(bundle.attachments[1].content, atts[1].content);
        assert_eq!(report.ratio, 1.0);
        assert!(bundle.dictionary.is_empty());
        assert!(bundle.quant_params.is_empty());
    }

    #[test]
    fn all_stages_are_timed_in_order() {
        let (_, report) = run_pipeline("Some prompt text.", &[], &PipelineConfig::default()).unwrap();
        let stages: Vec<Stage> = report.stage_timings.iter().map(|t| t.stage).collect();
        assert_eq!(stages, Stage::ALL);
    }

    #[test]
    fn empty_prompt_passes_through() {
        let (bundle, report) = run_pipeline("", &[], &PipelineConfig::default()).unwrap();
        assert_eq!(bundle.compressed_prompt, "");
        assert_eq!(report.ratio, 1.0);
        assert!(report.fidelity.is_none());
    }

    #[test]
    fn table_cells_stay_within_error_bound() {
        let mut config = PipelineConfig::default();
        config.quant.bits = 8;
        let atts = [Attachment::table("table.csv", samples::TABLE)];
        let (bundle, _) = run_pipeline("q", &atts, &config).unwrap();
        let original = Table::parse(samples::TABLE).unwrap();
        let rendered = Table::parse(&bundle.attachments[0].content).unwrap();
        let restored = Table::parse(&bundle.restore_attachment("table.csv").unwrap()).unwrap();
        for q in &bundle.quant_params[0].sidecar.columns {
            let eps = q.column.max_error().unwrap();
            for r in 0..original.rows.len() {
                let x: f64 = original.rows[r][q.index].parse().unwrap();
                let shown: f64 = rendered.rows[r][q.index].parse().unwrap();
                let back: f64 = restored.rows[r][q.index].parse().unwrap();
                assert!((x - shown).abs() <= eps);
                assert!((x - back).abs() <= eps);
            }
        }
    }

    #[test]
    fn text_attachments_restore_byte_exact() {
        let atts = [Attachment::text("report.txt", samples::REPORT)];
        let (bundle, report) = run_pipeline(samples::PROMPT, &atts, &PipelineConfig::default()).unwrap();
        assert_eq!(bundle.restore_attachment("report.txt").unwrap(), samples::REPORT);
        assert!(report.dictionary[0].dictionary.len() == 3);
        assert!(matches!(
            bundle.restore_attachment("missing"),
            Err(RestoreError::UnknownAttachment(_))
        ));
    }

    #[test]
    fn dictionary_legend_is_appended_and_counted() {
        let mut config = PipelineConfig::default();
        config.append_dictionary_as_context = true;
        let atts = [Attachment::text("report.txt", samples::REPORT)];
        let (bundle, report) = run_pipeline(samples::PROMPT, &atts, &config).unwrap();
        assert!(bundle.compressed_prompt.contains("[report.txt] Abbreviations: A1 = "));
        assert!(report.context.compressed > 0);
        assert_eq!(
            report.compressed_tokens,
            count_tokens(&bundle.compressed_prompt) + count_tokens(&bundle.attachments[0].content)
        );
    }

    #[test]
    fn exemplar_modes() {
        let pool: Vec<String> = samples::EXEMPLARS.lines().map(str::to_string).collect();
        let mut config = PipelineConfig::identity();
        config.exemplar.mode = ExemplarMode::Representative;
        let pipeline = Pipeline::new(config.clone()).unwrap();
        let input = PipelineInput {
            prompt: "What was the change?".into(),
            attachments: vec![],
            exemplar_pool: pool.clone(),
        };
        let out = pipeline.run(&input).unwrap();
        let chosen = &out.bundle.report.selected_exemplars;
        assert_eq!(chosen.len(), 3);
        assert!(chosen.iter().all(|e| e.cluster_id.is_some()));
        let ids: std::collections::HashSet<_> = chosen.iter().map(|e| e.cluster_id).collect();
        assert_eq!(ids.len(), 3);
        assert!(out.bundle.compressed_prompt.ends_with("What was the change?"));
        let again = pipeline.run(&input).unwrap();
        assert_eq!(again.bundle.compressed_prompt, out.bundle.compressed_prompt);
        assert_eq!(again.bundle.report.without_timings(), out.bundle.report.without_timings());

        config.exemplar.mode = ExemplarMode::Random;
        let out = Pipeline::new(config).unwrap().run(&input).unwrap();
        assert_eq!(out.bundle.report.selected_exemplars.len(), 3);
        assert!(out.bundle.report.exemplars.original > out.bundle.report.exemplars.compressed);
    }

    #[test]
    fn invalid_configs_are_rejected_at_initialization() {
        let mut c = PipelineConfig::default();
        c.model = "unknown".into();
        let err = Pipeline::new(c).unwrap_err();
        assert_eq!(err.stage, Stage::Initialization);
        assert_eq!(err.kind, FailureKind::Config);

        let mut c = PipelineConfig::default();
        c.ngram.n = 1;
        assert!(Pipeline::new(c).is_err());
        assert!(PipelineConfig::from_json(r#"{"budget":{"mode":"ratio","value":2.0}}"#).is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.ngram.n, 2);
        assert_eq!(c.ngram.top_k, 3);
        let c = PipelineConfig::from_json(r#"{"ngram":{"n":3},"quant":{"mode":"off"}}"#).unwrap();
        assert_eq!(c.ngram.n, 3);
        assert_eq!(c.ngram.top_k, 3);
    }

    #[test]
    fn env_style_overrides_switch_to_remote() {
        let mut p = ProvidersConfig::default();
        p.apply_overrides(Some("http://127.0.0.1:9/score".into()), Some("tok".into()), None);
        assert_eq!(p.scorer.kind, ScorerKind::Remote);
        assert_eq!(p.scorer.token.as_deref(), Some("tok"));
        assert_eq!(p.embedder.kind, EmbedderKind::Hashing);
        p.apply_overrides(Some(String::new()), None, Some("http://e".into()));
        assert_eq!(p.scorer.endpoint.as_deref(), Some("http://127.0.0.1:9/score"));
        assert_eq!(p.embedder.kind, EmbedderKind::Remote);
    }
}
