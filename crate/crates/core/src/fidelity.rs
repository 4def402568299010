//! Embedding-based fidelity between original and compressed text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingProvider};

pub const DEFAULT_WARNING_THRESHOLD: f64 = 0.92;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FidelityError {
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("no text pairs to compare")]
    EmptyPairs,
    #[error("pair {id}: {source}")]
    Embedding {
        id: String,
        #[source]
        source: EmbeddingError,
    },
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, FidelityError> {
    if a.len() != b.len() {
        return Err(FidelityError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(FidelityError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Percentile (`q` in `[0, 1]`) by linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub id: String,
    pub cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub mean: f64,
    pub p5: f64,
    pub pairs: Vec<PairSimilarity>,
}

impl SimilarityReport {
    pub fn from_values(pairs: Vec<PairSimilarity>) -> Result<Self, FidelityError> {
        let values: Vec<f64> = pairs.iter().map(|p| p.cos).collect();
        let p5 = percentile(&values, 0.05).ok_or(FidelityError::EmptyPairs)?;
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self { mean, p5, pairs })
    }

    pub fn per_pair(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.cos).collect()
    }

    /// True when the worst-case (5th percentile) similarity falls below `threshold`.
    pub fn below(&self, threshold: f64) -> bool {
        self.p5 < threshold
    }
}

/// Embeds both sides of every `(id, original, compressed)` triple.
pub fn similarity_report(
    pairs: &[(String, String, String)],
    provider: &dyn EmbeddingProvider,
) -> Result<SimilarityReport, FidelityError> {
    if pairs.is_empty() {
        return Err(FidelityError::EmptyPairs);
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (id, original, compressed) in pairs {
        let wrap = |source| FidelityError::Embedding {
            id: id.clone(),
            source,
        };
        let a = provider.embed(original).map_err(wrap)?;
        let b = provider.embed(compressed).map_err(wrap)?;
        out.push(PairSimilarity {
            id: id.clone(),
            cos: cosine(&a, &b)?,
        });
    }
    SimilarityReport::from_values(out)
}
