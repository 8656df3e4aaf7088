//! Gaussian noise with optional cross-round correlation, plus the
//! prefix-sum RMSE objective used to choose the correlating matrix.
//!
//! A correlation is a lower-triangular matrix `A` (written `C^{-1}` in the
//! matrix-factorization literature); the noise emitted at round `t` is
//! `unit * sum_{j<=t} A[t][j] * z_j` with `z_j ~ N(0, sigma^2 I)`.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::Vector;

/// Lower-triangular noise-correlating matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseCorrelation {
    /// Independent noise each round.
    Identity { horizon: u64 },
    /// Dense lower-triangular matrix; row `t` holds the `t+1` coefficients
    /// multiplying `z_1..z_{t+1}`.
    Explicit { rows: Vec<Vec<f64>> },
    /// Toeplitz band: round `t` uses `coefficients[t - j]` on `z_j` for
    /// `t - j < bands`.
    BandedToeplitz { coefficients: Vec<f64>, horizon: u64 },
}

impl NoiseCorrelation {
    pub fn identity(horizon: u64) -> Self {
        NoiseCorrelation::Identity { horizon }
    }

    pub fn explicit(rows: Vec<Vec<f64>>) -> Result<Self> {
        let c = NoiseCorrelation::Explicit { rows };
        c.validate()?;
        Ok(c)
    }

    pub fn banded(coefficients: Vec<f64>, horizon: u64) -> Result<Self> {
        let c = NoiseCorrelation::BandedToeplitz {
            coefficients,
            horizon,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseCorrelation::Identity { horizon } => {
                if *horizon == 0 {
                    return Err(Error::validation("horizon must be >= 1"));
                }
            }
            NoiseCorrelation::Explicit { rows } => {
                if rows.is_empty() {
                    return Err(Error::validation("explicit matrix must be non-empty"));
                }
                for (t, row) in rows.iter().enumerate() {
                    if row.len() != t + 1 {
                        return Err(Error::validation(format!(
                            "row {t} must have {} entries (lower triangle), got {}",
                            t + 1,
                            row.len()
                        )));
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::validation("matrix entries must be finite"));
                    }
                    if row[t] == 0.0 {
                        return Err(Error::validation(format!("zero diagonal entry at row {t}")));
                    }
                }
            }
            NoiseCorrelation::BandedToeplitz {
                coefficients,
                horizon,
            } => {
                if coefficients.is_empty() {
                    return Err(Error::validation("band must have at least one coefficient"));
                }
                if coefficients[0] == 0.0 {
                    return Err(Error::validation("leading band coefficient must be nonzero"));
                }
                if coefficients.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("band coefficients must be finite"));
                }
                if coefficients.len() as u64 > *horizon {
                    return Err(Error::validation(format!(
                        "bands ({}) exceed horizon ({horizon})",
                        coefficients.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> u64 {
        match self {
            NoiseCorrelation::Identity { horizon } => *horizon,
            NoiseCorrelation::Explicit { rows } => rows.len() as u64,
            NoiseCorrelation::BandedToeplitz { horizon, .. } => *horizon,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, NoiseCorrelation::Identity { .. })
    }

    /// How many past raw draws round `t` can reference (including its own).
    fn history_len(&self) -> usize {
        match self {
            NoiseCorrelation::Identity { .. } => 1,
            NoiseCorrelation::Explicit { rows } => rows.len(),
            NoiseCorrelation::BandedToeplitz { coefficients, .. } => coefficients.len(),
        }
    }

    /// Coefficient on `z_j` in round `t` (both 0-indexed, `j <= t`).
    pub fn coefficient(&self, t: u64, j: u64) -> f64 {
        debug_assert!(j <= t);
        match self {
            NoiseCorrelation::Identity { .. } => {
                if t == j {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseCorrelation::Explicit { rows } => rows[t as usize][j as usize],
            NoiseCorrelation::BandedToeplitz { coefficients, .. } => {
                let lag = (t - j) as usize;
                if lag < coefficients.len() {
                    coefficients[lag]
                } else {
                    0.0
                }
            }
        }
    }

    /// Squared norm of row `t` of the matrix (0-indexed); this is the
    /// variance amplification of the round-`t` noise relative to i.i.d.
    pub fn row_norm_sq(&self, t: u64) -> f64 {
        match self {
            NoiseCorrelation::Identity { .. } => 1.0,
            NoiseCorrelation::Explicit { rows } => {
                rows[t as usize].iter().map(|c| c * c).sum()
            }
            NoiseCorrelation::BandedToeplitz { coefficients, .. } => coefficients
                .iter()
                .take(t as usize + 1)
                .map(|c| c * c)
                .sum(),
        }
    }

    /// Squared norm of column `j` (0-indexed) of the `horizon x horizon`
    /// principal block.
    pub fn col_norm_sq(&self, j: u64) -> f64 {
        let t_max = self.horizon();
        match self {
            NoiseCorrelation::Identity { .. } => 1.0,
            NoiseCorrelation::Explicit { rows } => (j..t_max)
                .map(|t| {
                    let c = rows[t as usize][j as usize];
                    c * c
                })
                .sum(),
            NoiseCorrelation::BandedToeplitz { coefficients, .. } => coefficients
                .iter()
                .take((t_max - j) as usize)
                .map(|c| c * c)
                .sum(),
        }
    }

    /// Max column norm of the inverse matrix (the "strategy" matrix whose
    /// columns carry the sensitivity). For a lower-triangular matrix the
    /// first column is the longest, and for Toeplitz bands the inverse is
    /// Toeplitz, so only one triangular solve is needed. Explicit matrices
    /// pay a dense solve per column; intended for small horizons.
    pub fn max_col_norm_of_inverse(&self) -> f64 {
        match self {
            NoiseCorrelation::Identity { .. } => 1.0,
            NoiseCorrelation::BandedToeplitz {
                coefficients,
                horizon,
            } => {
                let d = toeplitz_inverse_first_column(coefficients, *horizon as usize);
                d.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
            NoiseCorrelation::Explicit { rows } => {
                let t_max = rows.len();
                let mut max_sq: f64 = 0.0;
                for j in 0..t_max {
                    // forward-substitute column j of the inverse
                    let mut col = vec![0.0; t_max];
                    for t in j..t_max {
                        let mut rhs = if t == j { 1.0 } else { 0.0 };
                        for k in j..t {
                            rhs -= rows[t][k] * col[k];
                        }
                        col[t] = rhs / rows[t][t];
                    }
                    let norm_sq = col.iter().map(|v| v * v).sum();
                    max_sq = max_sq.max(norm_sq);
                }
                max_sq.sqrt()
            }
        }
    }

    /// Reads a dense `T x T` lower-triangular matrix from CSV (entries above
    /// the diagonal must be zero).
    pub fn explicit_from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut full: Vec<Vec<f64>> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row: std::result::Result<Vec<f64>, _> =
                record.iter().map(|f| f.parse::<f64>()).collect();
            full.push(row.map_err(|e| Error::validation(format!("bad matrix entry: {e}")))?);
        }
        let t_max = full.len();
        let mut rows = Vec::with_capacity(t_max);
        for (t, row) in full.into_iter().enumerate() {
            if row.len() != t_max {
                return Err(Error::validation(format!(
                    "matrix must be square: row {t} has {} of {t_max} entries",
                    row.len()
                )));
            }
            for (j, v) in row.iter().enumerate().skip(t + 1) {
                if *v != 0.0 {
                    return Err(Error::validation(format!(
                        "entry ({t},{j}) above the diagonal must be zero, got {v}"
                    )));
                }
            }
            rows.push(row[..=t].to_vec());
        }
        NoiseCorrelation::explicit(rows)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First column of the inverse of a lower-triangular Toeplitz band matrix.
fn toeplitz_inverse_first_column(coefficients: &[f64], len: usize) -> Vec<f64> {
    let c0 = coefficients[0];
    let mut d = vec![0.0; len];
    d[0] = 1.0 / c0;
    for k in 1..len {
        let mut acc = 0.0;
        for i in 1..coefficients.len().min(k + 1) {
            acc += coefficients[i] * d[k - i];
        }
        d[k] = -acc / c0;
    }
    d
}

/// Single-owner stream of (optionally correlated) Gaussian noise vectors.
///
/// The noise emitted at round `t` is exactly
/// `unit * sigma * sum_{j<=t} A[t][j] * z_j`, `z_j ~ N(0, I_dim)`, where
/// `unit` is the caller's sensitivity scale (`zeta / B` for gradients).
/// The sequence is a deterministic function of (seed, correlation, round).
#[derive(Debug, Clone)]
pub struct NoiseStream {
    correlation: NoiseCorrelation,
    sigma: f64,
    sensitivity_scale: f64,
    dim: usize,
    round: u64,
    history: VecDeque<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(
        correlation: NoiseCorrelation,
        sigma: f64,
        sensitivity_scale: f64,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        correlation.validate()?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::validation(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        if !sensitivity_scale.is_finite() {
            return Err(Error::validation("sensitivity scale must be finite"));
        }
        if dim == 0 {
            return Err(Error::validation("dimension must be >= 1"));
        }
        Ok(NoiseStream {
            correlation,
            sigma,
            sensitivity_scale,
            dim,
            round: 0,
            history: VecDeque::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn correlation(&self) -> &NoiseCorrelation {
        &self.correlation
    }

    pub fn is_correlated(&self) -> bool {
        !self.correlation.is_identity()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Draws the round's raw normals and returns the correlated, scaled
    /// noise vector; advances the round counter.
    pub fn next_noise(&mut self) -> Result<Vector> {
        let t = self.round;
        if t >= self.correlation.horizon() {
            return Err(Error::HorizonExhausted {
                round: t,
                horizon: self.correlation.horizon(),
            });
        }
        let z: Vec<f64> = (0..self.dim)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.history.push_back(z);
        while self.history.len() > self.correlation.history_len() {
            self.history.pop_front();
        }
        let unit = self.sigma * self.sensitivity_scale;
        let mut out = vec![0.0; self.dim];
        if unit != 0.0 {
            let len = self.history.len() as u64;
            for (offset, z_j) in self.history.iter().enumerate() {
                let j = t + 1 - len + offset as u64;
                let coeff = self.correlation.coefficient(t, j);
                if coeff != 0.0 {
                    for (o, zi) in out.iter_mut().zip(z_j) {
                        *o += coeff * zi;
                    }
                }
            }
            for o in out.iter_mut() {
                *o *= unit;
            }
        }
        self.round += 1;
        Ok(Vector::from_raw(out))
    }
}

/// Per-round variances (per coordinate, unit noise) of the prefix sums
/// `sum_{j<=t} (A z)_j` for `t = 1..=rounds`.
pub fn prefix_sum_variances(correlation: &NoiseCorrelation, rounds: u64) -> Result<Vec<f64>> {
    correlation.validate()?;
    if rounds == 0 || rounds > correlation.horizon() {
        return Err(Error::validation(format!(
            "rounds {rounds} outside horizon {}",
            correlation.horizon()
        )));
    }
    let t_max = rounds as usize;
    match correlation {
        NoiseCorrelation::Identity { .. } => Ok((1..=t_max).map(|t| t as f64).collect()),
        NoiseCorrelation::Explicit { rows } => {
            // partial column sums, updated row by row
            let mut col_sums = vec![0.0; t_max];
            let mut out = Vec::with_capacity(t_max);
            for t in 0..t_max {
                for (j, c) in rows[t].iter().enumerate() {
                    col_sums[j] += c;
                }
                out.push(col_sums[..=t].iter().map(|s| s * s).sum());
            }
            Ok(out)
        }
        NoiseCorrelation::BandedToeplitz { coefficients, .. } => {
            let b = coefficients.len();
            // P(m) = sum of the first m+1 coefficients
            let mut prefix = Vec::with_capacity(b);
            let mut acc = 0.0;
            for c in coefficients {
                acc += c;
                prefix.push(acc);
            }
            let prefix_sq: Vec<f64> = prefix.iter().map(|p| p * p).collect();
            // Var_t = sum_{m < min(t,b)} P(m)^2 + max(0, t-b) P(b-1)^2
            let mut out = Vec::with_capacity(t_max);
            let mut head = 0.0;
            for t in 1..=t_max {
                if t <= b {
                    head += prefix_sq[t - 1];
                    out.push(head);
                } else {
                    out.push(head + (t - b) as f64 * prefix_sq[b - 1]);
                }
            }
            Ok(out)
        }
    }
}

/// Root-mean of the prefix-sum variances over `rounds`, scaled by `unit`
/// (the per-round noise magnitude `zeta * sigma / B`).
pub fn prefix_sum_rmse(correlation: &NoiseCorrelation, rounds: u64, unit: f64) -> Result<f64> {
    let vars = prefix_sum_variances(correlation, rounds)?;
    let mean = vars.iter().sum::<f64>() / rounds as f64;
    Ok(unit * mean.sqrt())
}

/// Result of the banded-correlation search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandOptimization {
    pub correlation: NoiseCorrelation,
    /// Prefix-sum RMSE of the correlating matrix itself (unit noise).
    pub rmse: f64,
    /// Sensitivity-scaled objective `rmse * max_col_norm(inverse)`.
    pub objective: f64,
    /// Max column norm of the implied strategy matrix, for rescaling sigma.
    pub max_col_norm: Option<f64>,
    pub converged: bool,
    pub iterations: u64,
}

struct BandObjective {
    horizon: usize,
}

impl BandObjective {
    /// Mean (over rounds) prefix-sum variance and its gradient in the free
    /// coefficients `c_1..c_{b-1}`.
    fn rmse_sq_mean(&self, coeffs: &[f64], grad: &mut [f64]) -> f64 {
        let t = self.horizon as f64;
        let b = coeffs.len();
        let mut prefix = vec![0.0; b];
        let mut acc = 0.0;
        for (m, c) in coeffs.iter().enumerate() {
            acc += c;
            prefix[m] = acc;
        }
        let tail_weight = {
            let n = t - b as f64;
            n * (n + 1.0) / 2.0
        };
        let mut total = 0.0;
        for (m, p) in prefix.iter().enumerate() {
            total += (t - m as f64) * p * p;
        }
        total += tail_weight * prefix[b - 1] * prefix[b - 1];
        // d total / d c_i = 2 sum_{m>=i} (T-m) P(m) + 2 tail_weight P(b-1)
        let mut suffix = 0.0;
        for m in (1..b).rev() {
            suffix += (t - m as f64) * prefix[m];
            grad[m - 1] = 2.0 * (suffix + tail_weight * prefix[b - 1]) / t;
        }
        // the i = 1.. loop above misses the m terms below i; suffix runs from b-1 down ✓
        total / t
    }

    /// Squared max column norm of the inverse and its gradient (adjoint of
    /// the triangular Toeplitz inversion recursion).
    fn sens_sq(&self, coeffs: &[f64], grad: &mut [f64]) -> f64 {
        let t_max = self.horizon;
        let b = coeffs.len();
        let d = toeplitz_inverse_first_column(coeffs, t_max);
        let l: f64 = d.iter().map(|v| v * v).sum();
        // reverse pass: d_k = -sum_{i=1..min(k,b-1)} c_i d_{k-i}  (c_0 = 1)
        let mut lambda = vec![0.0; t_max];
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        for k in (1..t_max).rev() {
            let lam = lambda[k] + 2.0 * d[k];
            for i in 1..b.min(k + 1) {
                grad[i - 1] -= lam * d[k - i];
                lambda[k - i] -= lam * coeffs[i];
            }
        }
        l
    }
}

/// Searches banded-Toeplitz coefficients (`c_0` fixed to 1) minimizing the
/// sensitivity-scaled prefix-sum RMSE `rmse(A) * max_col_norm(A^{-1})` by
/// gradient descent with backtracking. Scale-invariance of the objective
/// makes `c_0 = 1` a normalization rather than a constraint.
pub fn optimize_banded(rounds: u64, bands: usize, normalize: bool) -> Result<BandOptimization> {
    if bands == 0 || bands as u64 > rounds {
        return Err(Error::validation(format!(
            "bands must satisfy 1 <= bands <= rounds, got {bands} vs {rounds}"
        )));
    }
    let finish = |coeffs: Vec<f64>, converged: bool, iterations: u64| -> Result<BandOptimization> {
        let correlation = NoiseCorrelation::banded(coeffs, rounds)?;
        let rmse = prefix_sum_rmse(&correlation, rounds, 1.0)?;
        let sens = correlation.max_col_norm_of_inverse();
        Ok(BandOptimization {
            rmse,
            objective: rmse * sens,
            max_col_norm: normalize.then_some(sens),
            correlation,
            converged,
            iterations,
        })
    };
    if bands == 1 {
        return finish(vec![1.0], true, 0);
    }

    let obj = BandObjective {
        horizon: rounds as usize,
    };
    let n_free = bands - 1;
    let eval = |free: &[f64], grad_out: &mut [f64]| -> f64 {
        let mut coeffs = Vec::with_capacity(bands);
        coeffs.push(1.0);
        coeffs.extend_from_slice(free);
        let mut g_r = vec![0.0; n_free];
        let mut g_s = vec![0.0; n_free];
        let r_sq = obj.rmse_sq_mean(&coeffs, &mut g_r);
        let s_sq = obj.sens_sq(&coeffs, &mut g_s);
        let r = r_sq.sqrt();
        let s = s_sq.sqrt();
        for i in 0..n_free {
            // grad of r*s with r = sqrt(r_sq), s = sqrt(s_sq)
            grad_out[i] = s * g_r[i] / (2.0 * r) + r * g_s[i] / (2.0 * s);
        }
        r * s
    };

    // L-BFGS with Armijo backtracking; the objective is smooth and the
    // two-loop recursion handles its poor conditioning at large bands.
    const MAX_ITERS: u64 = 2000;
    const GRAD_TOL: f64 = 1e-7;
    const MEMORY: usize = 10;
    let mut free = vec![0.0; n_free];
    let mut grad = vec![0.0; n_free];
    let mut f = eval(&free, &mut grad);
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> =
        std::collections::VecDeque::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut flat_iters = 0u32;
    while iterations < MAX_ITERS {
        iterations += 1;
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < GRAD_TOL * f.max(1.0) || flat_iters >= 8 {
            converged = true;
            break;
        }
        // two-loop recursion for the search direction
        let mut dir = grad.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let alpha = rho * dot(s, &dir);
            for (d, yi) in dir.iter_mut().zip(y) {
                *d -= alpha * yi;
            }
            alphas.push(alpha);
        }
        if let Some((s, y, _)) = history.back() {
            let scale = dot(s, y) / dot(y, y);
            for d in dir.iter_mut() {
                *d *= scale;
            }
        }
        for ((s, y, rho), alpha) in history.iter().zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &dir);
            for (d, si) in dir.iter_mut().zip(s) {
                *d += (alpha - beta) * si;
            }
        }
        for d in dir.iter_mut() {
            *d = -*d;
        }
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // fall back to steepest descent
            for (d, g) in dir.iter_mut().zip(&grad) {
                *d = -g;
            }
            slope = -gnorm * gnorm;
            history.clear();
        }
        let mut step = 1.0;
        let mut trial = vec![0.0; n_free];
        let mut trial_grad = vec![0.0; n_free];
        let mut accepted = false;
        for _ in 0..50 {
            for i in 0..n_free {
                trial[i] = free[i] + step * dir[i];
            }
            let f_trial = eval(&trial, &mut trial_grad);
            if f_trial <= f + 1e-4 * step * slope {
                let s: Vec<f64> = trial.iter().zip(&free).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-18 {
                    if history.len() == MEMORY {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                if f - f_trial <= 1e-13 * f.abs() {
                    flat_iters += 1;
                } else {
                    flat_iters = 0;
                }
                free.copy_from_slice(&trial);
                grad.copy_from_slice(&trial_grad);
                f = f_trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // step collapsed to rounding level: treat as converged
            converged = true;
            break;
        }
    }

    let mut coeffs = Vec::with_capacity(bands);
    coeffs.push(1.0);
    coeffs.extend_from_slice(&free);
    finish(coeffs, converged, iterations)
}
