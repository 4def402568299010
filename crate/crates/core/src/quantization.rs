//! Numeric column quantization: uniform fixed-bit codes with a worst-case
//! error bound, or 1-D k-means centroid codes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_BITS: u32 = 16;
pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("column {0:?} has no non-missing values")]
    EmptyColumn(String),
    #[error("bit width {0} outside 1..=16")]
    InvalidBits(u32),
    #[error("k = {k} invalid for a column with {distinct} distinct values")]
    InvalidK { k: usize, distinct: usize },
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("range {range} cannot meet tolerance {tolerance} with 16 bits")]
    ToleranceUnreachable { range: f64, tolerance: f64 },
    #[error("column {0:?} contains a non-finite value")]
    NonFinite(String),
    #[error("code {code} out of range for {levels} levels")]
    CodeOutOfRange { code: u32, levels: usize },
    #[error("malformed table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    pub name: String,
    /// `None` marks a missing cell.
    pub values: Vec<Option<f64>>,
}

impl NumericColumn {
    pub fn new(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }

    pub fn dense(name: impl Into<String>, values: &[f64]) -> Self {
        Self::new(name, values.iter().copied().map(Some).collect())
    }

    pub fn missing_mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_none).collect()
    }

    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    fn check(&self) -> Result<(f64, f64), QuantError> {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in self.present() {
            if !v.is_finite() {
                return Err(QuantError::NonFinite(self.name.clone()));
            }
            min = min.min(v);
            max = max.max(v);
        }
        if min > max {
            return Err(QuantError::EmptyColumn(self.name.clone()));
        }
        if !(max - min).is_finite() {
            return Err(QuantError::NonFinite(self.name.clone()));
        }
        Ok((min, max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformQuantParams {
    pub min: f64,
    pub max: f64,
    pub bits: u32,
}

impl UniformQuantParams {
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    /// Worst-case reconstruction error `(max - min) / (L - 1)`.
    pub fn max_error(&self) -> f64 {
        if self.max == self.min {
            0.0
        } else {
            (self.max - self.min) / (self.levels() - 1) as f64
        }
    }

    pub fn encode(&self, x: f64) -> u32 {
        if self.max == self.min {
            return 0;
        }
        let top = (self.levels() - 1) as f64;
        // f64::round rounds half away from zero.
        let q = ((x - self.min) / (self.max - self.min) * top).round();
        q.clamp(0.0, top) as u32
    }

    pub fn decode(&self, code: u32) -> f64 {
        if self.max == self.min {
            return self.min;
        }
        let top = (self.levels() - 1) as f64;
        self.min + code as f64 / top * (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansQuantParams {
    pub centroids: Vec<f64>,
    pub seed: u64,
}

/// Reconstruction parameters; serializes to the sidecar shapes
/// `{type: "uniform", min, max, bits}` and `{type: "kmeans", centroids, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum QuantParams {
    Uniform(UniformQuantParams),
    Kmeans(KMeansQuantParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedColumn {
    pub name: String,
    /// `None` where the source cell was missing.
    pub codes: Vec<Option<u32>>,
    pub params: QuantParams,
}

impl QuantizedColumn {
    pub fn missing_mask(&self) -> Vec<bool> {
        self.codes.iter().map(Option::is_none).collect()
    }

    pub fn dequantize(&self) -> Result<NumericColumn, QuantError> {
        match &self.params {
            QuantParams::Uniform(p) => dequantize_uniform(self, p),
            QuantParams::Kmeans(p) => dequantize_kmeans(self, p),
        }
    }

    /// Worst-case error for uniform codes; `None` for centroid codes.
    pub fn max_error(&self) -> Option<f64> {
        match &self.params {
            QuantParams::Uniform(p) => Some(p.max_error()),
            QuantParams::Kmeans(_) => None,
        }
    }
}

pub fn quantize_uniform(col: &NumericColumn, bits: u32) -> Result<QuantizedColumn, QuantError> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(QuantError::InvalidBits(bits));
    }
    let (min, max) = col.check()?;
    let params = UniformQuantParams { min, max, bits };
    Ok(QuantizedColumn {
        name: col.name.clone(),
        codes: col.values.iter().map(|v| v.map(|x| params.encode(x))).collect(),
        params: QuantParams::Uniform(params),
    })
}

fn dequantize_uniform(
    qcol: &QuantizedColumn,
    params: &UniformQuantParams,
) -> Result<NumericColumn, QuantError> {
    let levels = params.levels();
    let values = qcol
        .codes
        .iter()
        .map(|c| match c {
            Some(code) if (*code as usize) >= levels => Err(QuantError::CodeOutOfRange {
                code: *code,
                levels,
            }),
            Some(code) => Ok(Some(params.decode(*code))),
            None => Ok(None),
        })
        .collect::<Result<_, _>>()?;
    Ok(NumericColumn::new(qcol.name.clone(), values))
}

/// Smallest bit width whose worst-case error is within `tolerance`.
pub fn plan_bits_for_tolerance(col: &NumericColumn, tolerance: f64) -> Result<u32, QuantError> {
    if !(tolerance > 0.0) {
        return Err(QuantError::InvalidTolerance(tolerance));
    }
    let (min, max) = col.check()?;
    bits_for_range(max - min, tolerance)
}

pub fn bits_for_range(range: f64, tolerance: f64) -> Result<u32, QuantError> {
    if !(tolerance > 0.0) {
        return Err(QuantError::InvalidTolerance(tolerance));
    }
    (1..=MAX_BITS)
        .find(|&b| range / ((1u64 << b) - 1) as f64 <= tolerance)
        .ok_or(QuantError::ToleranceUnreachable { range, tolerance })
}

/// Result of a 1-D Lloyd run, with the SSE after every assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydTrace {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(centroids: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn sse(values: &[f64], centroids: &[f64], assignments: &[usize]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(x, &a)| (x - centroids[a]).powi(2))
        .sum()
}

/// Seeded k-means++ seeding over scalar values.
pub fn kmeans_pp_init_1d(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(values[rng.random_range(0..values.len())]);
    let mut d2: Vec<f64> = values.iter().map(|x| (x - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        chosen = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can leave target just past the last positive weight
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        } else {
            rng.random_range(0..values.len())
        };
        let c = values[pick];
        centroids.push(c);
        for (w, x) in d2.iter_mut().zip(values) {
            *w = w.min((x - c).powi(2));
        }
    }
    centroids
}

/// Lloyd iterations from the given starting centroids.
///
/// Stops when assignments are stable or after [`MAX_LLOYD_ITERATIONS`].
/// An emptied cluster is re-seeded at the value with the largest error.
pub fn lloyd_1d(values: &[f64], initial: Vec<f64>) -> LloydTrace {
    let k = initial.len();
    let mut centroids = initial;
    let mut assignments: Vec<usize> = values.iter().map(|&x| nearest(&centroids, x)).collect();
    let mut sse_history = vec![sse(values, &centroids, &assignments)];
    let mut iterations = 0;

    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&x, &a) in values.iter().zip(&assignments) {
            sums[a] += x;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = values
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (i, (x - centroids[nearest(&centroids, x)]).abs()))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centroids[j] = values[far];
            }
        }
        let next: Vec<usize> = values.iter().map(|&x| nearest(&centroids, x)).collect();
        let current = sse(values, &centroids, &next);
        debug_assert!(
            current <= sse_history.last().unwrap() * (1.0 + 1e-12) + 1e-12,
            "Lloyd SSE increased"
        );
        sse_history.push(current);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }

    LloydTrace {
        centroids,
        assignments,
        sse_history,
        iterations,
    }
}

pub fn quantize_kmeans(col: &NumericColumn, k: usize, seed: u64) -> Result<QuantizedColumn, QuantError> {
    col.check()?;
    let values: Vec<f64> = col.present().collect();
    let mut distinct = values.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(QuantError::InvalidK {
            k,
            distinct: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp_init_1d(&values, k, &mut rng);
    let trace = lloyd_1d(&values, init);

    let mut centroids = trace.centroids;
    centroids.sort_by(f64::total_cmp);
    centroids.dedup();

    let codes = col
        .values
        .iter()
        .map(|v| v.map(|x| nearest(&centroids, x) as u32))
        .collect();
    Ok(QuantizedColumn {
        name: col.name.clone(),
        codes,
        params: QuantParams::Kmeans(KMeansQuantParams { centroids, seed }),
    })
}

fn dequantize_kmeans(
    qcol: &QuantizedColumn,
    params: &KMeansQuantParams,
) -> Result<NumericColumn, QuantError> {
    let levels = params.centroids.len();
    let values = qcol
        .codes
        .iter()
        .map(|c| match c {
            Some(code) => params
                .centroids
                .get(*code as usize)
                .copied()
                .map(Some)
                .ok_or(QuantError::CodeOutOfRange { code: *code, levels }),
            None => Ok(None),
        })
        .collect::<Result<_, _>>()?;
    Ok(NumericColumn::new(qcol.name.clone(), values))
}

pub fn dequantize(qcol: &QuantizedColumn) -> Result<NumericColumn, QuantError> {
    qcol.dequantize()
}
