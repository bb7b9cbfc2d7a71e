//! Class-probability KL divergence and embedding cycle consistency.

use crate::error::{CoreError, Result};

/// Probabilities below this are raised to it before renormalizing.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

/// One probability vector per clip over a shared set of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    rows: Vec<Vec<f64>>,
}

impl ClassProbabilities {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(CoreError::Shape(format!(
                    "clip {i} has {} classes, expected {classes}",
                    row.len()
                )));
            }
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(CoreError::Domain(format!("clip {i} has a negative or non-finite probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CoreError::Domain(format!("clip {i} probabilities sum to {sum}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_clips(&self) -> usize {
        self.rows.len()
    }

    pub fn n_classes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

fn floored(p: &[f64]) -> Vec<f64> {
    let raised: Vec<f64> = p.iter().map(|&x| x.max(PROBABILITY_FLOOR)).collect();
    let sum: f64 = raised.iter().sum();
    raised.into_iter().map(|x| x / sum).collect()
}

/// KL(p || q) for one clip after flooring and renormalizing both.
pub fn kl_single(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (floored(p), floored(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Mean over paired clips of `sum_c p_ref(c) ln(p_ref(c) / p_gen(c))`.
pub fn kl_divergence(reference: &ClassProbabilities, generated: &ClassProbabilities) -> Result<f64> {
    if reference.n_clips() != generated.n_clips() {
        return Err(CoreError::Shape(format!(
            "{} reference clips vs {} generated clips",
            reference.n_clips(),
            generated.n_clips()
        )));
    }
    if reference.n_classes() != generated.n_classes() {
        return Err(CoreError::Shape(format!(
            "{} reference classes vs {} generated classes",
            reference.n_classes(),
            generated.n_classes()
        )));
    }
    if reference.n_clips() == 0 {
        return Err(CoreError::UndefinedMetric("KL divergence over zero clips".into()));
    }
    let total: f64 = reference
        .rows
        .iter()
        .zip(&generated.rows)
        .map(|(p, q)| kl_single(p, q))
        .sum();
    Ok(total / reference.n_clips() as f64)
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!("vector lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(CoreError::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean cosine similarity over paired embeddings.
pub fn cycle_consistency(generated: &[Vec<f32>], reference: &[Vec<f32>]) -> Result<f64> {
    if generated.len() != reference.len() {
        return Err(CoreError::Shape(format!(
            "{} generated vs {} reference embeddings",
            generated.len(),
            reference.len()
        )));
    }
    if generated.is_empty() {
        return Err(CoreError::UndefinedMetric("cycle consistency over zero pairs".into()));
    }
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        total += cosine_similarity(g, r)?;
    }
    Ok(total / generated.len() as f64)
}
