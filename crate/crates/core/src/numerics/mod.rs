//! Vector primitives and the chi-squared quantile used by RASA.

mod chi2;

pub use chi2::{
    chi2_quantile, chi2_upper_quantile, ln_gamma, regularized_gamma_p, regularized_gamma_q,
    TailConvention,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("empty input")]
    Empty,
    #[error("non-finite component at index {0}")]
    NonFinite(usize),
    #[error("tail probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("degrees of freedom must be at least 1")]
    InvalidDegreesOfFreedom,
    #[error("incomplete gamma domain error: a={a}, x={x}")]
    GammaDomain { a: f64, x: f64 },
    #[error("chi-squared quantile did not converge (p={p}, df={df}, residual={residual:e})")]
    NonConvergence { p: f64, df: u32, residual: f64 },
}

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Result<Self, NumericsError> {
        if components.is_empty() {
            return Err(NumericsError::Empty);
        }
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Vector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|c| c * factor).collect())
    }

    /// Unit-length copy; errors on a zero vector.
    pub fn normalized(&self) -> Result<Vector, NumericsError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(NumericsError::ZeroNorm);
        }
        Ok(self.scaled(1.0 / n))
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<(), NumericsError> {
    if u.len() != v.len() {
        return Err(NumericsError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(())
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine over raw slices of equal length. A zero-norm side yields 0, so that
/// a degenerate centroid makes every candidate tie.
pub(crate) fn cosine_or_zero(u: &[f64], v: &[f64]) -> f64 {
    let denom = norm(u) * norm(v);
    if denom == 0.0 {
        return 0.0;
    }
    (dot(u, v) / denom).clamp(-1.0, 1.0)
}

pub(crate) fn sq_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `dot(u, v) / (|u| |v|)`, clamped to [-1, 1].
pub fn cosine_sim(u: &Vector, v: &Vector) -> Result<f64, NumericsError> {
    check_dims(&u.0, &v.0)?;
    let denom = u.norm() * v.norm();
    if denom == 0.0 {
        return Err(NumericsError::ZeroNorm);
    }
    Ok((dot(&u.0, &v.0) / denom).clamp(-1.0, 1.0))
}

/// Componentwise arithmetic mean.
pub fn mean_vector<'a, I>(vectors: I) -> Result<Vector, NumericsError>
where
    I: IntoIterator<Item = &'a Vector>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(NumericsError::Empty)?;
    let mut sum = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        check_dims(&sum, &v.0)?;
        for (s, c) in sum.iter_mut().zip(&v.0) {
            *s += c;
        }
        count += 1;
    }
    let n = count as f64;
    Ok(Vector(sum.into_iter().map(|s| s / n).collect()))
}

pub fn sq_euclidean(u: &Vector, v: &Vector) -> Result<f64, NumericsError> {
    check_dims(&u.0, &v.0)?;
    Ok(sq_distance(&u.0, &v.0))
}
