//! Synthetic tasks: a two-dimensional quadratic with per-coordinate
//! curvatures, and one-dimensional sparse logistic regression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vector::Vector;

/// Loss of model `(x, y)` on example `(a, b)`:
/// `(c_x/2)(x-a)^2 + (c_y/2)(y-b)^2`, examples `(a, b) ~ N(0, cov)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticTask {
    pub c_x: f64,
    pub c_y: f64,
    /// Per-coordinate example variances; identity by default, or the
    /// rescaled covariance `((c^2 + s^2)/c^2)` used to mimic gradient noise.
    pub example_var: (f64, f64),
}

impl QuadraticTask {
    pub fn new(c_x: f64, c_y: f64) -> Result<Self> {
        if !(c_x > 0.0 && c_y > 0.0) {
            return Err(Error::validation("curvatures must be positive"));
        }
        Ok(QuadraticTask {
            c_x,
            c_y,
            example_var: (1.0, 1.0),
        })
    }

    /// Example distribution whose noiseless gradients match the identity
    /// task's gradients with extra per-coordinate noise `s`.
    pub fn with_rescaled_covariance(c_x: f64, c_y: f64, s: f64) -> Result<Self> {
        let mut task = QuadraticTask::new(c_x, c_y)?;
        task.example_var = (
            (c_x * c_x + s * s) / (c_x * c_x),
            (c_y * c_y + s * s) / (c_y * c_y),
        );
        Ok(task)
    }

    pub fn sample_example(&self, rng: &mut impl Rng) -> (f64, f64) {
        let a: f64 = rng.sample::<f64, _>(StandardNormal) * self.example_var.0.sqrt();
        let b: f64 = rng.sample::<f64, _>(StandardNormal) * self.example_var.1.sqrt();
        (a, b)
    }

    pub fn loss(&self, theta: &Vector, example: (f64, f64)) -> f64 {
        let dx = theta[0] - example.0;
        let dy = theta[1] - example.1;
        0.5 * self.c_x * dx * dx + 0.5 * self.c_y * dy * dy
    }

    pub fn grad(&self, theta: &Vector, example: (f64, f64)) -> Vector {
        Vector::from_raw(vec![
            self.c_x * (theta[0] - example.0),
            self.c_y * (theta[1] - example.1),
        ])
    }

    /// Expected loss over the example distribution.
    pub fn expected_loss(&self, theta: &Vector) -> f64 {
        0.5 * self.c_x * (theta[0] * theta[0] + self.example_var.0)
            + 0.5 * self.c_y * (theta[1] * theta[1] + self.example_var.1)
    }
}

/// Sparse 1-D logistic regression: `x ~ N(0,1)`,
/// `y ~ Bern(1/(1+e^{-x}))`, then `x` is zeroed for a `sparsity` fraction
/// of training examples. Ground truth is `theta = 1`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRegTask {
    pub sparsity: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for LogRegTask {
    fn default() -> Self {
        LogRegTask {
            sparsity: 0.9,
            n_train: 1000,
            n_test: 10_000,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogRegTask {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::validation("sparsity must lie in [0, 1]"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::validation("dataset sizes must be positive"));
        }
        Ok(())
    }

    /// Draws one example: the label is generated from the pre-sparsified
    /// input, then the input is zeroed with probability `sparsity`.
    pub fn sample(&self, sparsity: f64, rng: &mut impl Rng) -> (f64, f64) {
        let x: f64 = rng.sample(StandardNormal);
        let y = if rng.gen::<f64>() < sigmoid(x) { 1.0 } else { 0.0 };
        if sparsity > 0.0 && rng.gen::<f64>() < sparsity {
            (0.0, y)
        } else {
            (x, y)
        }
    }

    /// Seeded training set (sparsified).
    pub fn train_set(&self, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.n_train)
            .map(|_| self.sample(self.sparsity, &mut rng))
            .collect()
    }

    /// Seeded test set (never sparsified).
    pub fn test_set(&self, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.n_test).map(|_| self.sample(0.0, &mut rng)).collect()
    }
}

/// Log loss and gradient for one example at parameter `theta` (scalar
/// model): `grad = (p - y) x` with `p = sigmoid(theta x)`.
pub fn logreg_loss_grad(theta: f64, example: (f64, f64)) -> (f64, f64) {
    let (x, y) = example;
    let z = theta * x;
    // log(1 + e^{-|z|}) + max(z, 0) - y z, stable at large |z|
    let loss = (-z.abs()).exp().ln_1p() + z.max(0.0) - y * z;
    let grad = (sigmoid(z) - y) * x;
    (loss, grad)
}

/// Mean log loss over a dataset.
pub fn test_loss(theta: f64, dataset: &[(f64, f64)]) -> f64 {
    let total: f64 = dataset
        .iter()
        .map(|&ex| logreg_loss_grad(theta, ex).0)
        .sum();
    total / dataset.len() as f64
}

/// Writes a dataset as `x,y` CSV rows for inspection.
pub fn dump_dataset_csv(path: &Path, dataset: &[(f64, f64)]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "x,y")?;
    for (x, y) in dataset {
        writeln!(file, "{x:?},{y:?}")?;
    }
    Ok(())
}
