//! Representative few-shot exemplar selection: standardize features, sweep
//! k-means over a range of k, keep the k with the best mean silhouette and
//! take the member nearest each centroid as that cluster's prototype.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingProvider};

pub const DEFAULT_K_MIN: usize = 5;
pub const DEFAULT_K_MAX: usize = 50;
const KMEANS_RESTARTS: u64 = 4;
const KMEANS_MAX_ITERATIONS: usize = 300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExemplarError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("row {row} has {got} features, expected {expected}")]
    DimensionMismatch { row: usize, expected: usize, got: usize },
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub item_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, item_ids: Vec<String>) -> Result<Self, ExemplarError> {
        assert_eq!(rows.len(), item_ids.len(), "one id per row");
        if let Some(first) = rows.first() {
            let d = first.len();
            for (i, r) in rows.iter().enumerate() {
                if r.len() != d {
                    return Err(ExemplarError::DimensionMismatch {
                        row: i,
                        expected: d,
                        got: r.len(),
                    });
                }
                if r.iter().any(|x| !x.is_finite()) {
                    return Err(ExemplarError::NonFinite(i));
                }
            }
        }
        Ok(Self { rows, item_ids })
    }

    /// Rows with ids `"0"`, `"1"`, ….
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ExemplarError> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Self::new(rows, ids)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_features(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClusteringResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: f64,
}

impl ClusteringResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// One prototype row per cluster, indexed by cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PrototypeSet {
    pub item_ids: Vec<String>,
    pub rows: Vec<usize>,
}

/// Per-column z-scores with the population standard deviation; constant
/// columns become zeros.
pub fn standardize(matrix: &FeatureMatrix) -> Result<FeatureMatrix, ExemplarError> {
    let n = matrix.n_rows();
    if n < 2 {
        return Err(ExemplarError::TooFewRows { needed: 2, got: n });
    }
    let d = matrix.n_features();
    let mut rows = matrix.rows.clone();
    for j in 0..d {
        let mean = matrix.rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = matrix.rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for (out, r) in rows.iter_mut().zip(&matrix.rows) {
            out[j] = if sd > 1e-12 * mean.abs().max(1.0) {
                (r[j] - mean) / sd
            } else {
                0.0
            };
        }
    }
    Ok(FeatureMatrix {
        rows,
        item_ids: matrix.item_ids.clone(),
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(centroids: &[Vec<f64>], row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(row, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn kmeans_pp(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &centroids[0])).collect();
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
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("positive weight"))
        } else {
            rng.random_range(0..rows.len())
        };
        let c = rows[pick].clone();
        for (w, r) in d2.iter_mut().zip(rows) {
            *w = w.min(dist2(r, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(rows: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let k = centroids.len();
    let d = rows[0].len();
    let mut assignments: Vec<usize> = rows.iter().map(|r| nearest(&centroids, r)).collect();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(r).for_each(|(s, x)| *s += x);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..rows.len())
                    .max_by(|&a, &b| {
                        let da = dist2(&rows[a], &centroids[nearest(&centroids, &rows[a])]);
                        let db = dist2(&rows[b], &centroids[nearest(&centroids, &rows[b])]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("non-empty");
                centroids[j] = rows[far].clone();
            }
        }
        let next: Vec<usize> = rows.iter().map(|r| nearest(&centroids, r)).collect();
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    let sse = rows
        .iter()
        .zip(&assignments)
        .map(|(r, &a)| dist2(r, &centroids[a]))
        .sum();
    (centroids, assignments, sse)
}

/// Seeded k-means (k-means++ seeding, a few restarts, best SSE kept).
///
/// Clusters left empty (only possible with duplicate rows) are dropped, so
/// the returned `k` can be smaller than requested.
pub fn kmeans(matrix: &FeatureMatrix, k: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<usize>), ExemplarError> {
    let n = matrix.n_rows();
    if k == 0 || n < k {
        return Err(ExemplarError::TooFewRows { needed: k.max(1), got: n });
    }
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart.wrapping_mul(0x9E37_79B9)));
        let init = kmeans_pp(&matrix.rows, k, &mut rng);
        let run = lloyd(&matrix.rows, init);
        if best.as_ref().map_or(true, |b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignments, _) = best.expect("at least one restart");

    let mut remap = vec![usize::MAX; k];
    let mut kept = Vec::new();
    for &a in &assignments {
        if remap[a] == usize::MAX {
            remap[a] = 0; // mark used
        }
    }
    for j in 0..k {
        if remap[j] != usize::MAX {
            remap[j] = kept.len();
            kept.push(centroids[j].clone());
        }
    }
    let assignments = assignments.into_iter().map(|a| remap[a]).collect();
    Ok((kept, assignments))
}

/// Mean silhouette with Euclidean distances. Points in singleton clusters
/// score 0, as do points with `a = b = 0`.
pub fn silhouette_score(matrix: &FeatureMatrix, assignments: &[usize]) -> Result<f64, ExemplarError> {
    let n = matrix.n_rows();
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ExemplarError::SingleCluster);
    }

    let mut total = 0.0;
    let mut per_cluster = vec![0.0; k];
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] <= 1 {
            continue;
        }
        per_cluster.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..n {
            if j != i {
                per_cluster[assignments[j]] += dist2(&matrix.rows[i], &matrix.rows[j]).sqrt();
            }
        }
        let a = per_cluster[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| per_cluster[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Effective k range: both ends clamped to `[2, n - 1]`.
pub fn clamp_k_range(k_min: usize, k_max: usize, n: usize) -> Option<(usize, usize)> {
    if n < 3 {
        return None;
    }
    let hi = k_max.clamp(2, n - 1);
    let lo = k_min.clamp(2, n - 1).min(hi);
    Some((lo, hi))
}

/// Runs k-means for each k in the clamped range and keeps the clustering
/// with the highest silhouette (smallest k on ties).
pub fn select_k_by_silhouette(
    matrix: &FeatureMatrix,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<ClusteringResult, ExemplarError> {
    let n = matrix.n_rows();
    let (lo, hi) = clamp_k_range(k_min, k_max, n).ok_or(ExemplarError::TooFewRows { needed: 3, got: n })?;
    let mut best: Option<ClusteringResult> = None;
    for k in lo..=hi {
        let (centroids, assignments) = kmeans(matrix, k, seed)?;
        if centroids.len() < 2 {
            continue;
        }
        let silhouette = silhouette_score(matrix, &assignments)?;
        if best.as_ref().map_or(true, |b| silhouette > b.silhouette) {
            best = Some(ClusteringResult {
                k: centroids.len(),
                assignments,
                centroids,
                silhouette,
            });
        }
    }
    best.ok_or(ExemplarError::SingleCluster)
}

/// Per cluster, the row nearest its centroid (lowest row index on ties).
pub fn select_prototypes(matrix: &FeatureMatrix, result: &ClusteringResult) -> PrototypeSet {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; result.k];
    for (i, (row, &c)) in matrix.rows.iter().zip(&result.assignments).enumerate() {
        let d = dist2(row, &result.centroids[c]);
        if best[c].map_or(true, |(_, bd)| d < bd) {
            best[c] = Some((i, d));
        }
    }
    let rows: Vec<usize> = best.into_iter().flatten().map(|(i, _)| i).collect();
    PrototypeSet {
        item_ids: rows.iter().map(|&i| matrix.item_ids[i].clone()).collect(),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Exemplar {
    pub item_id: String,
    pub text: String,
    pub cluster_id: Option<usize>,
}

/// Embeds `pool`, clusters it and returns up to `count` prototypes taken from
/// the largest clusters, in pool order.
pub fn representative_exemplars(
    pool: &[String],
    count: usize,
    embedder: &dyn EmbeddingProvider,
    seed: u64,
) -> Result<Vec<Exemplar>, ExemplarError> {
    if pool.len() <= count {
        return Ok(pool
            .iter()
            .enumerate()
            .map(|(i, t)| Exemplar {
                item_id: i.to_string(),
                text: t.clone(),
                cluster_id: None,
            })
            .collect());
    }
    let refs: Vec<&str> = pool.iter().map(String::as_str).collect();
    let embedded = embedder.embed_batch(&refs)?;
    let matrix = standardize(&FeatureMatrix::from_rows(embedded)?)?;
    let result = select_k_by_silhouette(&matrix, DEFAULT_K_MIN, DEFAULT_K_MAX, seed)?;
    let prototypes = select_prototypes(&matrix, &result);

    let sizes = result.cluster_sizes();
    let mut clusters: Vec<usize> = (0..result.k).collect();
    clusters.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut picked: Vec<(usize, usize)> = clusters
        .into_iter()
        .take(count)
        .map(|c| (prototypes.rows[c], c))
        .collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|(row, c)| Exemplar {
            item_id: row.to_string(),
            text: pool[row].clone(),
            cluster_id: Some(c),
        })
        .collect())
}

/// Seeded uniform draw of `count` items without replacement, in pool order.
pub fn random_exemplars(pool: &[String], count: usize, seed: u64) -> Vec<Exemplar> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), count.min(pool.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| Exemplar {
            item_id: i.to_string(),
            text: pool[i].clone(),
            cluster_id: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn standardize_uses_population_variance() {
        let m = standardize(&matrix(&[&[1.0, 5.0], &[3.0, 5.0]])).unwrap();
        assert_eq!(m.rows, [[-1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let m = matrix(&[&[1.0, 10.0], &[2.0, -4.0], &[7.5, 3.0], &[0.0, 0.5]]);
        let once = standardize(&m).unwrap();
        let twice = standardize(&once).unwrap();
        for (a, b) in once.rows.iter().flatten().zip(twice.rows.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_needs_two_rows() {
        assert_eq!(
            standardize(&matrix(&[&[1.0]])),
            Err(ExemplarError::TooFewRows { needed: 2, got: 1 })
        );
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = FeatureMatrix::from_rows(vec![vec![1.0, 2.0], vec![1.0]]).unwrap_err();
        assert!(matches!(err, ExemplarError::DimensionMismatch { row: 1, .. }));
    }

    #[test]
    fn silhouette_of_separated_pairs() {
        let m = matrix(&[&[0.0, 0.0], &[0.0, 0.1], &[10.0, 0.0], &[10.0, 0.1]]);
        let s = silhouette_score(&m, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.9);
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let m = matrix(&[&[1.0], &[1.0], &[1.0], &[1.0]]);
        assert_eq!(silhouette_score(&m, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(silhouette_score(&m, &[0, 0, 0, 0]), Err(ExemplarError::SingleCluster));
        let m = matrix(&[&[0.0], &[1.0], &[5.0]]);
        // singleton clusters score 0
        let s = silhouette_score(&m, &[0, 1, 2]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn silhouette_hand_computed_line() {
        // points 0, 1 | 4, 6 on a line
        // p0: a=1, b=(4+6)/2=5 -> 0.8 ; p1: a=1, b=(3+5)/2=4 -> 0.75
        // p2: a=2, b=(4+3)/2=3.5 -> 3/7 ; p3: a=2, b=(6+5)/2=5.5 -> 7/11
        let m = matrix(&[&[0.0], &[1.0], &[4.0], &[6.0]]);
        let s = silhouette_score(&m, &[0, 0, 1, 1]).unwrap();
        let expected = (0.8 + 0.75 + 3.0 / 7.0 + 7.0 / 11.0) / 4.0;
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn k_range_clamping() {
        assert_eq!(clamp_k_range(2, 50, 6), Some((2, 5)));
        assert_eq!(clamp_k_range(5, 50, 6), Some((5, 5)));
        assert_eq!(clamp_k_range(5, 50, 100), Some((5, 50)));
        assert_eq!(clamp_k_range(5, 50, 2), None);
    }

    #[test]
    fn prototype_tie_goes_to_lower_row() {
        let m = matrix(&[&[0.0, 0.0], &[2.0, 0.0], &[10.0, 10.0]]);
        let result = ClusteringResult {
            k: 2,
            assignments: vec![0, 0, 1],
            centroids: vec![vec![1.0, 0.0], vec![10.0, 10.0]],
            silhouette: 0.0,
        };
        let p = select_prototypes(&m, &result);
        assert_eq!(p.rows, [0, 2]);
        assert_eq!(p.item_ids, ["0", "2"]);
    }

    #[test]
    fn identical_silhouettes_pick_smallest_k() {
        // Four identical points: every clustering scores 0.
        let m = matrix(&[&[1.0], &[1.0], &[1.0], &[1.0], &[2.0]]);
        let r = select_k_by_silhouette(&m, 2, 4, 1).unwrap();
        assert_eq!(r.k, 2);
    }

    #[test]
    fn random_exemplars_are_seeded() {
        let pool: Vec<String> = (0..10).map(|i| format!("item {i}")).collect();
        let a = random_exemplars(&pool, 3, 42);
        assert_eq!(a.len(), 3);
        assert_eq!(a, random_exemplars(&pool, 3, 42));
        let ids: Vec<usize> = a.iter().map(|e| e.item_id.parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(random_exemplars(&pool[..2], 3, 1).len(), 2);
    }
}
