//! Fréchet distance between Gaussians fitted to two embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CoreError, Result};

/// Regularization added to both covariances when either is singular.
pub const COVARIANCE_EPSILON: f64 = 1e-6;

/// `M x D` embeddings from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: DMatrix<f64>,
    pub label: String,
}

impl EmbeddingSet {
    pub fn new(vectors: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if vectors.nrows() < 2 {
            return Err(CoreError::InsufficientData {
                what: "embeddings for a Fréchet fit",
                needed: 2,
                got: vectors.nrows(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Domain("embedding set contains non-finite values".into()));
        }
        Ok(Self {
            vectors,
            label: label.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(CoreError::Shape("embedding rows have differing dimensions".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]), label)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Sample mean and unbiased covariance.
    pub fn gaussian(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.vectors.nrows() as f64;
        let mean = self.vectors.row_mean().transpose();
        let mut centered = self.vectors.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (m - 1.0);
        (mean, cov)
    }
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    min <= max * 1e-12
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`.
///
/// The trace of the product root is taken as the trace of the symmetric
/// `(S1^(1/2) S2 S1^(1/2))^(1/2)`, which has the same eigenvalues. Negative
/// eigenvalues from rounding are clamped to zero.
pub fn frechet_distance(reference: &EmbeddingSet, generated: &EmbeddingSet) -> Result<f64> {
    if reference.dim() != generated.dim() {
        return Err(CoreError::Shape(format!(
            "embedding dimensions differ: {} ({}) vs {} ({})",
            reference.dim(),
            reference.label,
            generated.dim(),
            generated.label
        )));
    }
    let (mu1, mut s1) = reference.gaussian();
    let (mu2, mut s2) = generated.gaussian();
    if is_singular(&s1) || is_singular(&s2) {
        let eps = DMatrix::identity(s1.nrows(), s1.ncols()) * COVARIANCE_EPSILON;
        s1 += &eps;
        s2 += &eps;
    }
    let diff = &mu1 - &mu2;
    let root1 = symmetric_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let fd = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_cross;
    Ok(fd.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_sets_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = EmbeddingSet::new(DMatrix::from_fn(20, 5, |_, _| rng.random::<f64>()), "a").unwrap();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn one_dimensional_closed_form() {
        // Samples {-1, 1}: mean 0, unbiased variance 2. Scale by 1/sqrt(2) for variance 1.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let a = EmbeddingSet::from_rows(&[vec![-s], vec![s]], "a").unwrap();
        let b = EmbeddingSet::from_rows(&[vec![1.0 - s], vec![1.0 + s]], "b").unwrap();
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let a = EmbeddingSet::new(DMatrix::zeros(3, 2), "a").unwrap();
        let b = EmbeddingSet::new(DMatrix::zeros(3, 3), "b").unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(CoreError::Shape(_))));
    }

    #[test]
    fn needs_two_samples() {
        assert!(EmbeddingSet::new(DMatrix::zeros(1, 3), "a").is_err());
    }

    #[test]
    fn singular_covariances_stay_finite() {
        // Rank-1 sets in 3-D.
        let a = EmbeddingSet::from_rows(&[vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]], "a").unwrap();
        let b = EmbeddingSet::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 3.0, 0.0]], "b").unwrap();
        let fd = frechet_distance(&a, &b).unwrap();
        assert!(fd.is_finite() && fd > 0.0);
    }
}
