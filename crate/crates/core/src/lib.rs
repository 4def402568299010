//! Prompt compression toolkit.
//!
//! Pruning of low-information phrases in the prompt, lossless n-gram
//! abbreviation of text attachments, bounded-error quantization of numeric
//! table columns and representative few-shot exemplar selection, tied
//! together by [`pipeline::Pipeline`].

pub mod abbreviation;
pub mod cost;
pub mod embedding;
pub mod exemplars;
pub mod fidelity;
pub mod lexicon;
pub mod pipeline;
pub mod pruning;
pub mod quantization;
pub mod scoring;
pub mod table;

pub use abbreviation::{abbreviate, abbreviate_document, expand, expand_text, AbbrevDictionary, AbbrevError, NGramConfig};
pub use lexicon::{count_tokens, tokenize, FrequencyModel, Token, TokenKind, TokenStream};
pub use pipeline::{
    ablation_grid, run_pipeline, Attachment, AttachmentKind, Bundle, CompressionReport, FailureKind, Pipeline,
    PipelineConfig, PipelineError, PipelineInput, PipelineOutput, Stage,
};
pub use pruning::Budget;
pub use quantization::{quantize_kmeans, quantize_uniform, NumericColumn, QuantError, QuantizedColumn};
pub use scoring::{combine_scores, ProbabilityProvider};

/// Bundled sample inputs used by the demo commands and tests.
pub mod samples {
    pub const PROMPT: &str = include_str!("../data/sample/prompt.txt");
    pub const REPORT: &str = include_str!("../data/sample/report.txt");
    pub const TABLE: &str = include_str!("../data/sample/table.csv");
    pub const EXEMPLARS: &str = include_str!("../data/sample/exemplars.txt");
    pub const CORPUS: &str = crate::pipeline::BUNDLED_CORPUS;
}
