//! Non-private baselines and the private Adam/AdaGrad variants.
//!
//! Every step function consumes a state and returns a fresh one. The
//! private variants take the round's per-example gradients plus one (or
//! two) noise streams; the stream is expected to be scaled by
//! `zeta * sigma / B`, and variant-specific factors (the sqrt(2)
//! composition factor, the squared-gradient sensitivity) are applied here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseStream;
use crate::vector::{average_clipped, GradBatch, PrivacyParams, Vector};

/// Optimizer hyperparameters shared across variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Base learning rate.
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Stability constant in the update denominator.
    pub eps_s: f64,
    /// Stability constant in the scale-then-privatize clipping scale.
    pub eps_s1: f64,
    /// Update-denominator stability constant for scale-then-privatize.
    pub eps_s2: f64,
    /// Apply the sqrt(2) composition factor to both independent-moment
    /// noises; switching it off is the "for free" variant.
    pub ime_scale_sigma: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            eta: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps_s: 1e-8,
            eps_s1: 1e-8,
            eps_s2: 1e-8,
            ime_scale_sigma: true,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("eps_s", self.eps_s),
            ("eps_s1", self.eps_s1),
            ("eps_s2", self.eps_s2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::validation(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        Ok(())
    }

    fn ime_factor(&self) -> f64 {
        if self.ime_scale_sigma {
            std::f64::consts::SQRT_2
        } else {
            1.0
        }
    }
}

/// Model, first and second moments, round counter, and the previous
/// normalized second moment kept for scale-then-privatize.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub theta: Vector,
    pub mu: Vector,
    pub nu: Vector,
    pub round: u64,
    pub prev_nu_hat: Vector,
    pub hyper: HyperParams,
}

impl OptimizerState {
    pub fn new(theta0: Vector, hyper: HyperParams) -> Result<Self> {
        hyper.validate()?;
        let dim = theta0.dim();
        Ok(OptimizerState {
            theta: theta0,
            mu: Vector::zeros(dim),
            nu: Vector::zeros(dim),
            round: 0,
            prev_nu_hat: Vector::zeros(dim),
            hyper,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    /// Normalized second moment `nu / (1 - beta2^t)`; zeros before the
    /// first step.
    pub fn nu_hat(&self) -> Vector {
        if self.round == 0 {
            return Vector::zeros(self.dim());
        }
        let denom = 1.0 - beta_pow(self.hyper.beta2, self.round);
        self.nu.scale(1.0 / denom)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: dim,
            });
        }
        Ok(())
    }
}

/// A private step's result: the new state, the norm of the averaged
/// clipped gradient (scaled-space for scale-then-privatize), and the
/// uncorrected normalized second moment the step produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: OptimizerState,
    pub clipped_norm: f64,
    pub nu_hat: Vector,
}

pub(crate) fn beta_pow(beta: f64, t: u64) -> f64 {
    if t <= i32::MAX as u64 {
        beta.powi(t as i32)
    } else {
        beta.powf(t as f64)
    }
}

/// Shared Adam moment recursion. `sq_term` is what multiplies
/// `(1 - beta2)` in the second-moment update; `denom` maps the normalized
/// second moment to the update denominator.
fn adam_core(
    state: &OptimizerState,
    g_for_mu: &Vector,
    sq_term: &Vector,
    denom: impl FnOnce(&Vector) -> Vector,
) -> (OptimizerState, Vector) {
    let h = &state.hyper;
    let t = state.round + 1;
    let mu = state.mu.scale(h.beta1).add(&g_for_mu.scale(1.0 - h.beta1));
    let mu_hat = mu.scale(1.0 / (1.0 - beta_pow(h.beta1, t)));
    let nu = state.nu.scale(h.beta2).add(&sq_term.scale(1.0 - h.beta2));
    let nu_hat = nu.scale(1.0 / (1.0 - beta_pow(h.beta2, t)));
    let theta = state
        .theta
        .sub(&mu_hat.scale(h.eta).div_or_zero(&denom(&nu_hat)));
    (
        OptimizerState {
            theta,
            mu,
            nu,
            round: t,
            prev_nu_hat: state.prev_nu_hat.clone(),
            hyper: *h,
        },
        nu_hat,
    )
}

/// One step of (non-private) Adam.
pub fn adam_step(state: &OptimizerState, g: &Vector) -> Result<OptimizerState> {
    state.check_dim(g.dim())?;
    let eps = state.hyper.eps_s;
    let (next, _) = adam_core(state, g, &g.square(), |nu_hat| {
        nu_hat.sqrt().add_scalar(eps)
    });
    Ok(next)
}

/// One step of (non-private) AdaGrad: `nu += g^2`, `theta -= eta g / sqrt(nu)`
/// with `0/0 := 0`.
pub fn adagrad_step(state: &OptimizerState, g: &Vector) -> Result<OptimizerState> {
    state.check_dim(g.dim())?;
    let nu = state.nu.add(&g.square());
    let theta = state
        .theta
        .sub(&g.scale(state.hyper.eta).div_or_zero(&nu.sqrt()));
    Ok(OptimizerState {
        theta,
        mu: state.mu.clone(),
        nu,
        round: state.round + 1,
        prev_nu_hat: state.prev_nu_hat.clone(),
        hyper: state.hyper,
    })
}

/// One step of SGD with (non-normalized) momentum:
/// `mu = beta1 mu + g`, `theta -= eta mu`.
pub fn sgd_momentum_step(state: &OptimizerState, g: &Vector) -> Result<OptimizerState> {
    state.check_dim(g.dim())?;
    let mu = state.mu.scale(state.hyper.beta1).add(g);
    let theta = state.theta.sub(&mu.scale(state.hyper.eta));
    Ok(OptimizerState {
        theta,
        mu,
        nu: state.nu.clone(),
        round: state.round + 1,
        prev_nu_hat: state.prev_nu_hat.clone(),
        hyper: state.hyper,
    })
}

fn noisy_avg(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<(Vector, Vector, f64)> {
    state.check_dim(batch.dim())?;
    privacy.validate()?;
    let g = average_clipped(batch, privacy.clip_norm, None)?;
    let z = noise.next_noise()?;
    state.check_dim(z.dim())?;
    let norm = g.norm2();
    Ok((g.add(&z), g, norm))
}

/// Clipped noisy gradients fed to SGD with momentum (the base private
/// algorithm the variants build on).
pub fn dp_sgd_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<StepOutcome> {
    let (g_tilde, _, clipped_norm) = noisy_avg(state, batch, noise, privacy)?;
    let next = sgd_momentum_step(state, &g_tilde)?;
    let nu_hat = next.nu_hat();
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat,
    })
}

/// Post-processing: privatize the averaged clipped gradient and hand it
/// to Adam as a black box.
pub fn dp_postprocess_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<StepOutcome> {
    let (g_tilde, _, clipped_norm) = noisy_avg(state, batch, noise, privacy)?;
    let eps = state.hyper.eps_s;
    let (next, nu_hat) = adam_core(state, &g_tilde, &g_tilde.square(), |nu_hat| {
        nu_hat.sqrt().add_scalar(eps)
    });
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat,
    })
}

/// Independent moment estimation: the gradient and its square are noised
/// separately, so the second-moment estimate is unbiased but can be
/// negative; the preconditioner takes the positive part.
pub fn dp_ime_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise_mu: &mut NoiseStream,
    noise_nu: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<StepOutcome> {
    state.check_dim(batch.dim())?;
    privacy.validate()?;
    let f = state.hyper.ime_factor();
    let g = average_clipped(batch, privacy.clip_norm, None)?;
    let clipped_norm = g.norm2();
    let z1 = noise_mu.next_noise()?;
    let z2 = noise_nu.next_noise()?;
    state.check_dim(z1.dim())?;
    state.check_dim(z2.dim())?;
    let g_for_mu = g.add(&z1.scale(f));
    // stream carries zeta sigma / B; lift it to the squared-gradient
    // sensitivity (2B+1) zeta^2 / B^2
    let b = privacy.batch_size as f64;
    let nu_noise_lift = f * (2.0 * b + 1.0) * privacy.clip_norm / b;
    let sq_term = g.square().add(&z2.scale(nu_noise_lift));
    let eps = state.hyper.eps_s;
    let (next, nu_hat) = adam_core(state, &g_for_mu, &sq_term, |nu_hat| {
        nu_hat.max_scalar(0.0).sqrt().add_scalar(eps)
    });
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat,
    })
}

/// Bias correction: post-processing with the known noise-induced bias
/// subtracted from the normalized second moment inside the denominator
/// `sqrt(max(nu_hat - bias, eps_s^2))`.
///
/// For correlated noise the per-round bias differs from the i.i.d.
/// `zeta^2 sigma^2 / B^2` and must be supplied by the caller.
pub fn dp_biascorrect_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
    mf_bias: Option<f64>,
) -> Result<StepOutcome> {
    let bias = match (noise.is_correlated(), mf_bias) {
        (true, None) => {
            return Err(Error::config(
                "bias correction with correlated noise requires a per-round bias value",
            ))
        }
        (_, Some(b)) => b,
        (false, None) => {
            let b = privacy.batch_size as f64;
            (privacy.clip_norm * noise.sigma() / b).powi(2)
        }
    };
    let (g_tilde, _, clipped_norm) = noisy_avg(state, batch, noise, privacy)?;
    let eps_sq = state.hyper.eps_s * state.hyper.eps_s;
    let (next, nu_hat) = adam_core(state, &g_tilde, &g_tilde.square(), |nu_hat| {
        nu_hat.add_scalar(-bias).max_scalar(eps_sq).sqrt()
    });
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat,
    })
}

/// Scale-then-privatize: clip and noise in the geometry of the previous
/// round's preconditioner, then unscale before the Adam update.
pub fn dp_stp_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<StepOutcome> {
    state.check_dim(batch.dim())?;
    privacy.validate()?;
    let scale = stp_scale(&state.prev_nu_hat, state.hyper.eps_s1)?;
    let g = average_clipped(batch, privacy.clip_norm, Some(&scale))?;
    let clipped_norm = g.norm2();
    let z = noise.next_noise()?;
    state.check_dim(z.dim())?;
    let g_tilde = g.add(&z).div(&scale);
    let eps2 = state.hyper.eps_s2;
    let (mut next, nu_hat) = adam_core(state, &g_tilde, &g_tilde.square(), |nu_hat| {
        nu_hat.sqrt().add_scalar(eps2)
    });
    next.prev_nu_hat = nu_hat.clone();
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat,
    })
}

fn stp_scale(prev_nu_hat: &Vector, eps_s1: f64) -> Result<Vector> {
    if eps_s1 == 0.0 && prev_nu_hat.min_entry() <= 0.0 {
        return Err(Error::validation(
            "scale-then-privatize with eps_s1 = 0 divides by zero on a zero preconditioner",
        ));
    }
    let denom = prev_nu_hat.sqrt().add_scalar(eps_s1);
    Ok(Vector::constant(prev_nu_hat.dim(), 1.0).div(&denom))
}

/// Side information: noisy gradients drive the first moment, but the
/// preconditioner is supplied externally (e.g. maintained from noiseless
/// gradients). The denominator keeps the `eps_s` term so that the sigma=0
/// case coincides with Adam exactly.
pub fn dp_sideinfo_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
    nu_hat_external: &Vector,
) -> Result<StepOutcome> {
    state.check_dim(nu_hat_external.dim())?;
    if nu_hat_external.min_entry() < 0.0 {
        return Err(Error::validation(
            "external preconditioner must be nonnegative",
        ));
    }
    let (g_tilde, _, clipped_norm) = noisy_avg(state, batch, noise, privacy)?;
    let next = side_info_update(state, &g_tilde, nu_hat_external);
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat: nu_hat_external.clone(),
    })
}

/// Scale-then-privatize composed with an external preconditioner: the
/// clipping geometry comes from the previous round's external value and
/// the update denominator from the current one.
pub fn dp_stp_sideinfo_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
    nu_hat_prev_external: &Vector,
    nu_hat_external: &Vector,
) -> Result<StepOutcome> {
    state.check_dim(batch.dim())?;
    state.check_dim(nu_hat_prev_external.dim())?;
    state.check_dim(nu_hat_external.dim())?;
    privacy.validate()?;
    if nu_hat_prev_external.min_entry() < 0.0 || nu_hat_external.min_entry() < 0.0 {
        return Err(Error::validation(
            "external preconditioner must be nonnegative",
        ));
    }
    let scale = stp_scale(nu_hat_prev_external, state.hyper.eps_s1)?;
    let g = average_clipped(batch, privacy.clip_norm, Some(&scale))?;
    let clipped_norm = g.norm2();
    let z = noise.next_noise()?;
    state.check_dim(z.dim())?;
    let g_tilde = g.add(&z).div(&scale);
    let mut next = side_info_update(state, &g_tilde, nu_hat_external);
    next.prev_nu_hat = nu_hat_external.clone();
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat: nu_hat_external.clone(),
    })
}

fn side_info_update(
    state: &OptimizerState,
    g_tilde: &Vector,
    nu_hat_external: &Vector,
) -> OptimizerState {
    let h = &state.hyper;
    let t = state.round + 1;
    let mu = state.mu.scale(h.beta1).add(&g_tilde.scale(1.0 - h.beta1));
    let mu_hat = mu.scale(1.0 / (1.0 - beta_pow(h.beta1, t)));
    let denom = nu_hat_external.sqrt().add_scalar(h.eps_s);
    let theta = state.theta.sub(&mu_hat.scale(h.eta).div_or_zero(&denom));
    // store the external value in the Adam parameterization of nu
    let nu = nu_hat_external.scale(1.0 - beta_pow(h.beta2, t));
    OptimizerState {
        theta,
        mu,
        nu,
        round: t,
        prev_nu_hat: state.prev_nu_hat.clone(),
        hyper: *h,
    }
}

/// AdaGrad on privatized gradients (black box): `nu += g_tilde^2`,
/// `theta -= eta g_tilde / sqrt(nu)`.
pub fn dp_adagrad_pp_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<StepOutcome> {
    let (g_tilde, _, clipped_norm) = noisy_avg(state, batch, noise, privacy)?;
    let next = adagrad_step(state, &g_tilde)?;
    let nu_hat = next.nu.clone();
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat,
    })
}

/// AdaGrad with independently noised gradient and squared gradient; the
/// accumulated estimate can be negative, so the learning rate is
/// `eta / max(1, sqrt(nu))`.
pub fn dp_adagrad_ime_step(
    state: &OptimizerState,
    batch: &GradBatch,
    noise_mu: &mut NoiseStream,
    noise_nu: &mut NoiseStream,
    privacy: &PrivacyParams,
) -> Result<StepOutcome> {
    state.check_dim(batch.dim())?;
    privacy.validate()?;
    let f = state.hyper.ime_factor();
    let g = average_clipped(batch, privacy.clip_norm, None)?;
    let clipped_norm = g.norm2();
    let z1 = noise_mu.next_noise()?;
    let z2 = noise_nu.next_noise()?;
    state.check_dim(z1.dim())?;
    state.check_dim(z2.dim())?;
    let g_tilde = g.add(&z1.scale(f));
    let b = privacy.batch_size as f64;
    let nu_noise_lift = f * (2.0 * b + 1.0) * privacy.clip_norm / b;
    let nu = state
        .nu
        .add(&g.square().add(&z2.scale(nu_noise_lift)));
    let denom = nu.max_scalar(0.0).sqrt().max_scalar(1.0);
    let theta = state
        .theta
        .sub(&g_tilde.scale(state.hyper.eta).div(&denom));
    let next = OptimizerState {
        theta,
        mu: state.mu.clone(),
        nu: nu.clone(),
        round: state.round + 1,
        prev_nu_hat: state.prev_nu_hat.clone(),
        hyper: state.hyper,
    };
    Ok(StepOutcome {
        state: next,
        clipped_norm,
        nu_hat: nu,
    })
}
