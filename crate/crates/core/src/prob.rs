//! Points on the probability simplex.
//!
//! `ProbVector` is used for labels, soft pseudo-labels and model
//! predictions alike. All arithmetic is done in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the simplex constraints.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A length-K probability vector, K >= 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Checks the simplex invariants and wraps `values`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidProb(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if !validate_prob(&values) {
            return Err(Error::InvalidProb(format!("{values:?} is not on the simplex")));
        }
        Ok(Self(values))
    }

    /// Wraps values the caller has already normalized (softmax output,
    /// convex combinations of valid vectors).
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        debug_assert!(validate_prob(&values), "{values:?}");
        Self(values)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 2, "uniform distribution needs k >= 2");
        Self(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; the smallest index wins ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Confidence = largest entry.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn l1_distance(&self, other: &ProbVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// First index of the maximum of a slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// True iff every entry lies in [0,1] and the entries sum to 1, both
/// within [`SIMPLEX_TOL`].
pub fn validate_prob(p: &[f64]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let in_range = p
        .iter()
        .all(|&v| v.is_finite() && v >= -SIMPLEX_TOL && v <= 1.0 + SIMPLEX_TOL);
    in_range && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL
}

pub fn one_hot(y: usize, k: usize) -> Result<ProbVector> {
    if k < 2 {
        return Err(Error::Precondition(format!("class count {k} < 2")));
    }
    if y >= k {
        return Err(Error::Index { index: y, len: k });
    }
    let mut v = vec![0.0; k];
    v[y] = 1.0;
    Ok(ProbVector(v))
}

/// `w / K + (1 - w) * p`.
pub fn mix_with_uniform(p: &ProbVector, w: f64) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Precondition(format!("mixing weight {w} outside [0,1]")));
    }
    if !validate_prob(&p.0) {
        return Err(Error::InvalidProb(format!("{:?}", p.0)));
    }
    let u = w / p.len() as f64;
    Ok(ProbVector(p.0.iter().map(|&pi| u + (1.0 - w) * pi).collect()))
}
