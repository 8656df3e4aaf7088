//! Dense vectors, the clipping operator, and batch-gradient aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable dense vector of finite f64 values.
///
/// All entries are finite on construction; operations return fresh vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN/Inf entries and zero length.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::validation("vector must have positive dimension"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite vector entry {bad}")));
        }
        Ok(Vector(values))
    }

    /// Internal constructor for values produced by our own arithmetic.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Vector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Vector(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_dim(&self, other: &Vector) {
        assert_eq!(
            self.dim(),
            other.dim(),
            "vector dimension mismatch: {} vs {}",
            self.dim(),
            other.dim()
        );
    }

    pub fn add(&self, other: &Vector) -> Vector {
        self.check_dim(other);
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.check_dim(other);
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * c).collect())
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Vector) -> Vector {
        self.check_dim(other);
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a * b).collect())
    }

    /// Element-wise quotient.
    pub fn div(&self, other: &Vector) -> Vector {
        self.check_dim(other);
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a / b).collect())
    }

    /// Element-wise quotient with the `0/0 := 0` convention.
    pub fn div_or_zero(&self, other: &Vector) -> Vector {
        self.check_dim(other);
        Vector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| if *b == 0.0 { 0.0 } else { a / b })
                .collect(),
        )
    }

    /// Element-wise square.
    pub fn square(&self) -> Vector {
        Vector(self.0.iter().map(|a| a * a).collect())
    }

    /// Element-wise square root (caller guarantees nonnegative entries).
    pub fn sqrt(&self) -> Vector {
        Vector(self.0.iter().map(|a| a.sqrt()).collect())
    }

    /// Element-wise max with a scalar.
    pub fn max_scalar(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|a| a.max(c)).collect())
    }

    /// Adds a scalar to every coordinate.
    pub fn add_scalar(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|a| a + c).collect())
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One round's per-example gradients.
#[derive(Debug, Clone)]
pub struct GradBatch {
    grads: Vec<Vector>,
}

impl GradBatch {
    pub fn new(grads: Vec<Vector>) -> Result<Self> {
        let first = grads
            .first()
            .ok_or_else(|| Error::validation("gradient batch must be non-empty"))?;
        let dim = first.dim();
        for g in &grads {
            if g.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: g.dim(),
                });
            }
        }
        Ok(GradBatch { grads })
    }

    /// Batch of `batch_size` copies of the same per-example gradient.
    pub fn replicated(grad: Vector, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        Ok(GradBatch {
            grads: vec![grad; batch_size],
        })
    }

    pub fn batch_size(&self) -> usize {
        self.grads.len()
    }

    pub fn dim(&self) -> usize {
        self.grads[0].dim()
    }

    pub fn grads(&self) -> &[Vector] {
        &self.grads
    }
}

/// The (clip norm, noise multiplier, batch size) triple governing every
/// noise scale `zeta * sigma / B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyParams {
    pub clip_norm: f64,
    pub noise_mult: f64,
    pub batch_size: usize,
}

impl PrivacyParams {
    pub fn new(clip_norm: f64, noise_mult: f64, batch_size: usize) -> Result<Self> {
        let p = PrivacyParams {
            clip_norm,
            noise_mult,
            batch_size,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::validation(format!(
                "clip norm must be finite and positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.noise_mult.is_finite() && self.noise_mult >= 0.0) {
            return Err(Error::validation(format!(
                "noise multiplier must be finite and nonnegative, got {}",
                self.noise_mult
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        Ok(())
    }

    /// Per-unit-sensitivity noise scale `zeta / B`.
    pub fn sensitivity_scale(&self) -> f64 {
        self.clip_norm / self.batch_size as f64
    }
}

/// `clip(v) = v * min(1, zeta / ||v||_2)`, with the zero vector as a fixed
/// point (`min(1, zeta/0)` is taken as 1).
pub fn clip(v: &Vector, clip_norm: f64) -> Result<Vector> {
    if !(clip_norm.is_finite() && clip_norm > 0.0) {
        return Err(Error::validation(format!(
            "clip norm must be finite and positive, got {clip_norm}"
        )));
    }
    let norm = v.norm2();
    if norm == 0.0 {
        return Ok(v.clone());
    }
    let factor = (clip_norm / norm).min(1.0);
    Ok(if factor >= 1.0 { v.clone() } else { v.scale(factor) })
}

/// Average of clipped (optionally pre-scaled) per-example gradients:
/// `(1/B) sum_j clip(w ⊙ g_j)` with `w = scale` or all-ones.
pub fn average_clipped(batch: &GradBatch, clip_norm: f64, scale: Option<&Vector>) -> Result<Vector> {
    if let Some(s) = scale {
        if s.dim() != batch.dim() {
            return Err(Error::DimensionMismatch {
                expected: batch.dim(),
                got: s.dim(),
            });
        }
        if s.iter().any(|v| *v <= 0.0) {
            return Err(Error::validation("scale entries must be positive"));
        }
    }
    let mut acc = Vector::zeros(batch.dim());
    for g in batch.grads() {
        let scaled = match scale {
            Some(s) => s.mul(g),
            None => g.clone(),
        };
        acc = acc.add(&clip(&scaled, clip_norm)?);
    }
    Ok(acc.scale(1.0 / batch.batch_size() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> Vector {
        Vector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn clip_scales_long_vectors() {
        let out = clip(&v(&[3.0, 4.0]), 1.0).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_identity_inside_ball() {
        let out = clip(&v(&[0.3, 0.4]), 1.0).unwrap();
        assert_eq!(out.as_slice(), &[0.3, 0.4]);
    }

    #[test]
    fn clip_zero_vector_fixed_point() {
        let out = clip(&v(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn clip_rejects_bad_norm() {
        assert!(clip(&v(&[1.0]), 0.0).is_err());
        assert!(clip(&v(&[1.0]), f64::NAN).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
        assert!(Vector::new(vec![]).is_err());
    }

    #[test]
    fn average_clipped_unit_clips() {
        let batch = GradBatch::new(vec![v(&[2.0, 0.0]), v(&[0.0, 2.0])]).unwrap();
        let out = average_clipped(&batch, 1.0, None).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn average_clipped_with_scale() {
        let batch = GradBatch::new(vec![v(&[0.5, 0.0])]).unwrap();
        let out = average_clipped(&batch, 1.0, Some(&v(&[2.0, 2.0]))).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn average_clipped_cancellation() {
        let batch = GradBatch::new(vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])]).unwrap();
        let out = average_clipped(&batch, 1.0, None).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn average_clipped_dim_mismatch() {
        let batch = GradBatch::new(vec![v(&[1.0, 0.0])]).unwrap();
        assert!(average_clipped(&batch, 1.0, Some(&v(&[1.0]))).is_err());
        assert!(GradBatch::new(vec![v(&[1.0]), v(&[1.0, 2.0])]).is_err());
    }

    #[test]
    fn average_clipped_rejects_nonpositive_scale() {
        let batch = GradBatch::new(vec![v(&[1.0])]).unwrap();
        assert!(average_clipped(&batch, 1.0, Some(&v(&[0.0]))).is_err());
        assert!(average_clipped(&batch, 1.0, Some(&v(&[-1.0]))).is_err());
    }
}
