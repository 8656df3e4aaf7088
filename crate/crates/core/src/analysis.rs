//! Closed-form quantities for the private second-moment estimates: bias
//! under independent and correlated noise, squared-gradient sensitivity,
//! variance lower bounds and the negative-coordinate regime thresholds,
//! and the scale-then-privatize steady state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseCorrelation;
use crate::optim::beta_pow;
use crate::vector::Vector;

/// Bias of the normalized second moment under post-processing with
/// independent noise: `zeta^2 sigma^2 / B^2`.
pub fn iid_nu_hat_bias(clip_norm: f64, sigma: f64, batch_size: usize) -> f64 {
    let unit = clip_norm * sigma / batch_size as f64;
    unit * unit
}

/// Bias of the raw (unnormalized) second moment at round `t`:
/// `(1 - beta2^t) zeta^2 sigma^2 / B^2`.
pub fn iid_nu_bias_raw(t: u64, beta2: f64, clip_norm: f64, sigma: f64, batch_size: usize) -> f64 {
    (1.0 - beta_pow(beta2, t)) * iid_nu_hat_bias(clip_norm, sigma, batch_size)
}

/// Exact bias of the normalized second moment at round `t` under
/// correlated noise: the decayed average of the correlating matrix's
/// squared row norms, `Tr(A^T D(beta2, t) A) * zeta^2 sigma^2 / B^2`.
pub fn mf_nu_bias_trace(
    correlation: &NoiseCorrelation,
    beta2: f64,
    t: u64,
    clip_norm: f64,
    sigma: f64,
    batch_size: usize,
) -> Result<f64> {
    if t == 0 || t > correlation.horizon() {
        return Err(Error::validation(format!(
            "round {t} outside horizon {}",
            correlation.horizon()
        )));
    }
    let unit_sq = iid_nu_hat_bias(clip_norm, sigma, batch_size);
    let norm = (1.0 - beta2) / (1.0 - beta_pow(beta2, t));
    let mut acc = 0.0;
    for j in 1..=t {
        acc += beta_pow(beta2, t - j) * correlation.row_norm_sq(j - 1);
    }
    Ok(norm * acc * unit_sq)
}

/// The whole bias trajectory `t = 1..=rounds`, computed by running the
/// decayed sum incrementally (identical values to [`mf_nu_bias_trace`]).
pub fn mf_nu_bias_sequence(
    correlation: &NoiseCorrelation,
    beta2: f64,
    rounds: u64,
    clip_norm: f64,
    sigma: f64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if rounds == 0 || rounds > correlation.horizon() {
        return Err(Error::validation(format!(
            "rounds {rounds} outside horizon {}",
            correlation.horizon()
        )));
    }
    let unit_sq = iid_nu_hat_bias(clip_norm, sigma, batch_size);
    let mut decayed = 0.0;
    let mut out = Vec::with_capacity(rounds as usize);
    for t in 1..=rounds {
        decayed = beta2 * decayed + correlation.row_norm_sq(t - 1);
        out.push((1.0 - beta2) / (1.0 - beta_pow(beta2, t)) * decayed * unit_sq);
    }
    Ok(out)
}

/// The literal recursion stated alongside the trace formula, starting
/// from `b_0 = 0`: the next value is
/// `((b2 - b2^{t+1})/(1 - b2^{t+1})) b_t` plus
/// `b2 (1 - b2)/(1 - b2^{t+1}) (A^T A)_{t+1,t+1} u^2`. It disagrees with the trace values (an extra `beta2`
/// factor at `t = 1`, and column rather than row norms); the divergence is
/// reported by tests, not patched.
pub fn mf_nu_bias_recursive(
    correlation: &NoiseCorrelation,
    beta2: f64,
    rounds: u64,
    clip_norm: f64,
    sigma: f64,
    batch_size: usize,
) -> Result<Vec<f64>> {
    if rounds == 0 || rounds > correlation.horizon() {
        return Err(Error::validation(format!(
            "rounds {rounds} outside horizon {}",
            correlation.horizon()
        )));
    }
    let unit_sq = iid_nu_hat_bias(clip_norm, sigma, batch_size);
    let mut out = Vec::with_capacity(rounds as usize);
    let mut b = 0.0;
    for t in 1..=rounds {
        let norm = 1.0 - beta_pow(beta2, t);
        b = (beta2 - beta_pow(beta2, t)) / norm * b
            + beta2 * (1.0 - beta2) / norm * correlation.col_norm_sq(t - 1) * unit_sq;
        out.push(b);
    }
    Ok(out)
}

/// Zero-out sensitivity bound for the averaged squared gradient:
/// `(2B - 1) zeta^2 / B^2`.
pub fn ime_sensitivity_bound(batch_size: usize, clip_norm: f64) -> f64 {
    let b = batch_size as f64;
    (2.0 * b - 1.0) * clip_norm * clip_norm / (b * b)
}

/// Lower bound on `Var[nu_hat_t]` for the post-processing path with a
/// constant averaged gradient `g`:
/// `(zeta^2 g^2 sigma^2 / B^2 + 2 zeta^4 sigma^4 / B^4) (1-b2)^2/(1-b2^2)`.
pub fn nu_variance_lower_bound(
    g: f64,
    clip_norm: f64,
    sigma: f64,
    batch_size: usize,
    beta2: f64,
) -> f64 {
    let b = batch_size as f64;
    let z2 = clip_norm * clip_norm;
    let s2 = sigma * sigma;
    let per_round = z2 * g * g * s2 / (b * b) + 2.0 * z2 * z2 * s2 * s2 / (b * b * b * b);
    per_round * variance_decay_factor(beta2)
}

/// `(1 - beta2)^2 / (1 - beta2^2)`; equals 1/1999 at beta2 = 0.999.
pub fn variance_decay_factor(beta2: f64) -> f64 {
    (1.0 - beta2) * (1.0 - beta2) / (1.0 - beta2 * beta2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeMode {
    /// All per-example gradients aligned: `B / sigma >= k sqrt(p)`.
    Optimistic,
    /// Orthogonal per-example gradients: `sqrt(B) / sigma >= k sqrt(p)`.
    Pessimistic,
    /// Optimistic with correlated noise on the second moment.
    MfOptimistic,
}

/// Parameters for the negative-coordinate regime check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeQuery {
    pub batch_size: f64,
    pub noise_mult: f64,
    pub dim: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub mode: RegimeMode,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegimeReport {
    /// The beta2-dependent constant `k` in the threshold.
    pub constant: f64,
    /// `k sqrt(p)`: minimal `B/sigma` (or `sqrt(B)/sigma`).
    pub required_ratio: f64,
    /// The query's actual ratio.
    pub actual_ratio: f64,
    pub satisfied: bool,
    /// Largest dimension admissible at the query's batch size and noise.
    pub implied_max_dim: f64,
}

/// Threshold below which unbiased second-moment estimates go negative in
/// a constant fraction of coordinates.
pub fn regime_threshold(query: &RegimeQuery) -> Result<RegimeReport> {
    let b2 = query.beta2;
    if !(0.0..1.0).contains(&b2) || b2 == 0.0 {
        return Err(Error::validation("beta2 must lie in (0, 1)"));
    }
    if query.batch_size <= 0.0 || query.dim <= 0.0 || query.clip_norm <= 0.0 {
        return Err(Error::validation("batch size, dim, clip must be positive"));
    }
    if query.noise_mult < 0.0 {
        return Err(Error::validation("noise multiplier must be nonnegative"));
    }
    let constant = match query.mode {
        RegimeMode::Optimistic | RegimeMode::Pessimistic => variance_decay_factor(b2).powf(0.25),
        RegimeMode::MfOptimistic => (1.0 - b2).sqrt(),
    };
    let required_ratio = constant * query.dim.sqrt();
    if query.noise_mult == 0.0 {
        return Ok(RegimeReport {
            constant,
            required_ratio: 0.0,
            actual_ratio: f64::INFINITY,
            satisfied: true,
            implied_max_dim: f64::INFINITY,
        });
    }
    let actual_ratio = match query.mode {
        RegimeMode::Optimistic | RegimeMode::MfOptimistic => query.batch_size / query.noise_mult,
        RegimeMode::Pessimistic => query.batch_size.sqrt() / query.noise_mult,
    };
    Ok(RegimeReport {
        constant,
        required_ratio,
        actual_ratio,
        satisfied: actual_ratio >= required_ratio,
        implied_max_dim: (actual_ratio / constant).powi(2),
    })
}

/// Scale-then-privatize contraction factor `c beta2` with
/// `c = 1 + (zeta^2 sigma^2 / B^2) (1 - beta2) / beta2`.
pub fn stp_contraction_factor(clip_norm: f64, sigma: f64, batch_size: usize, beta2: f64) -> f64 {
    let k = iid_nu_hat_bias(clip_norm, sigma, batch_size);
    let c = 1.0 + k * (1.0 - beta2) / beta2;
    c * beta2
}

/// Fixed point of the expected scale-then-privatize preconditioner:
/// `((1 - beta2) / (1 - c beta2)) g^2` per coordinate.
pub fn stp_steady_state(
    g_sq: &Vector,
    clip_norm: f64,
    sigma: f64,
    batch_size: usize,
    beta2: f64,
) -> Result<Vector> {
    if !(0.0 < beta2 && beta2 < 1.0) {
        return Err(Error::validation("beta2 must lie in (0, 1)"));
    }
    if g_sq.min_entry() < 0.0 {
        return Err(Error::validation("g_sq must be nonnegative"));
    }
    let k = iid_nu_hat_bias(clip_norm, sigma, batch_size);
    let cb = stp_contraction_factor(clip_norm, sigma, batch_size, beta2);
    if cb >= 1.0 {
        return Err(Error::NoSteadyState { noise_to_signal: k });
    }
    Ok(g_sq.scale((1.0 - beta2) / (1.0 - cb)))
}

/// One step of the exact expected-value recursion for the
/// scale-then-privatize preconditioner (single coordinate):
/// `E[nu_hat_t] = ((b2 - b2^t) nu_prev + (1-b2)(g^2 + k nu_prev)) / (1 - b2^t)`.
pub fn stp_expected_nu_step(
    nu_hat_prev: f64,
    g_sq: f64,
    clip_norm: f64,
    sigma: f64,
    batch_size: usize,
    beta2: f64,
    t: u64,
) -> f64 {
    let k = iid_nu_hat_bias(clip_norm, sigma, batch_size);
    let norm = 1.0 - beta_pow(beta2, t);
    ((beta2 - beta_pow(beta2, t)) * nu_hat_prev + (1.0 - beta2) * (g_sq + k * nu_hat_prev)) / norm
}

/// Random-search oracle for the squared-gradient sensitivity: maximizes
/// `|| avg(G)^2 - avg(G with one example zeroed)^2 ||_2` over per-example
/// gradients of norm at most `zeta`. The analytic witness (all gradients
/// equal, on the boundary) is always among the candidates.
pub fn brute_force_ime_sensitivity(
    batch_size: usize,
    clip_norm: f64,
    dim: usize,
    budget: u64,
    seed: u64,
) -> f64 {
    let b = batch_size;
    let value = |grads: &[Vec<f64>]| -> f64 {
        let mut avg = vec![0.0; dim];
        for g in grads.iter() {
            for (a, x) in avg.iter_mut().zip(g) {
                *a += x / b as f64;
            }
        }
        let mut avg_drop = avg.clone();
        for (a, x) in avg_drop.iter_mut().zip(&grads[b - 1]) {
            *a -= x / b as f64;
        }
        avg.iter()
            .zip(&avg_drop)
            .map(|(x, y)| {
                let d = x * x - y * y;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };

    // analytic witness: every gradient is zeta * e_1
    let mut witness = vec![vec![0.0; dim]; b];
    for g in witness.iter_mut() {
        g[0] = clip_norm;
    }
    let mut best = value(&witness);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grads = vec![vec![0.0; dim]; b];
    let evals = budget / b.max(1) as u64;
    for _ in 0..evals {
        for g in grads.iter_mut() {
            let mut norm_sq = 0.0;
            for x in g.iter_mut() {
                *x = rng.sample::<f64, _>(StandardNormal);
                norm_sq += *x * *x;
            }
            // mix boundary points with interior ones
            let radius = if rng.gen_bool(0.5) {
                clip_norm
            } else {
                clip_norm * rng.gen::<f64>().powf(1.0 / dim as f64)
            };
            let f = radius / norm_sq.sqrt();
            for x in g.iter_mut() {
                *x *= f;
            }
        }
        best = best.max(value(&grads));
    }
    best
}
