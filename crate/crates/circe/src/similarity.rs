//! Token-level late-interaction scoring: average over one side's tokens of
//! the maximum cosine similarity against the other side's tokens, plus the
//! two-score fusion used at inference.

use rayon::prelude::*;

use crate::corpus::{FeatureMatrix, MIN_ROW_NORM};

#[derive(Debug, thiserror::Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("row {row} on the {side} side has near-zero norm")]
    NearZeroNorm { side: &'static str, row: usize },
    #[error("empty feature list")]
    Empty,
    #[error("score {0} is not finite or outside [-1, 1]")]
    OutOfRange(f64),
}

/// A similarity value in `[-1, 1]` (up to 1e-6 numerical slack).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(f64);

impl Score {
    const SLACK: f64 = 1e-6;

    pub fn new(value: f64) -> Result<Self, SimilarityError> {
        if !value.is_finite() || value.abs() > 1.0 + Self::SLACK {
            return Err(SimilarityError::OutOfRange(value));
        }
        Ok(Score(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn row_norms(m: &FeatureMatrix, side: &'static str) -> Result<Vec<f64>, SimilarityError> {
    (0..m.rows())
        .map(|i| {
            let n = m.row(i).iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if n < MIN_ROW_NORM {
                Err(SimilarityError::NearZeroNorm { side, row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// MaxSim: `(1/k_a) * sum_z max_r cos(a_z, b_r)`. Not symmetric in its
/// arguments; the first is the query side.
pub fn maxsim(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<Score, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(SimilarityError::Empty);
    }
    let a_norms = row_norms(a, "query")?;
    let b_norms = row_norms(b, "target")?;
    let mut total = 0.0;
    for z in 0..a.rows() {
        let mut best = f64::NEG_INFINITY;
        for r in 0..b.rows() {
            let c = dot_f32(a.row(z), b.row(r)) / (a_norms[z] * b_norms[r]);
            if c > best {
                best = c;
            }
        }
        total += best;
    }
    Score::new(total / a.rows() as f64)
}

/// Batched MaxSim: entry `(i, j)` equals `maxsim(queries[i], targets[j])`.
/// Cells are computed by the exact per-pair kernel, so the result is
/// independent of how the batch is parallelized.
pub fn similarity_matrix(
    queries: &[FeatureMatrix],
    targets: &[FeatureMatrix],
) -> Result<Vec<Vec<Score>>, SimilarityError> {
    if queries.is_empty() || targets.is_empty() {
        return Err(SimilarityError::Empty);
    }
    queries
        .par_iter()
        .map(|q| targets.iter().map(|t| maxsim(q, t)).collect())
        .collect()
}

/// Fuses composed-query and generated-target-text similarities by their
/// arithmetic mean.
pub fn fuse(s_hat: Score, s_tilde: Score) -> Score {
    Score((s_hat.0 + s_tilde.0) / 2.0)
}
