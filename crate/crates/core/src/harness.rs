//! Multi-trial seeded experiment execution, learning-rate tuning, and
//! per-round diagnostics.
//!
//! Seed discipline: the dataset (and, for streaming problems, the
//! per-round example stream) is a function of the experiment's base seed
//! only, so trials differ purely in their noise draws; each trial's noise
//! lanes derive from `base_seed + trial`. Tuning runs draw noise from a
//! held-out block so the final report never selects on its own seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis;
use crate::error::{Error, Result};
use crate::noise::{NoiseCorrelation, NoiseStream};
use crate::optim::{self, HyperParams, OptimizerState, StepOutcome};
use crate::problems::{logreg_loss_grad, test_loss, LogRegTask, QuadraticTask};
use crate::seed::{lane, tag};
use crate::vector::{average_clipped, GradBatch, PrivacyParams, Vector};

/// Task the optimizer runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// Two-dimensional quadratic; a fresh example per round.
    Quadratic {
        c_x: f64,
        c_y: f64,
        /// When set, examples come from the rescaled covariance that mimics
        /// per-coordinate gradient noise of this magnitude.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rescaled_noise: Option<f64>,
    },
    /// One-dimensional sparse logistic regression, single pass over a
    /// fixed training set.
    LogReg {
        sparsity: f64,
        n_train: usize,
        n_test: usize,
    },
    /// Every example in every round has this exact gradient.
    ConstantGradient { gradient: Vec<f64> },
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProblemSpec::Quadratic { .. } => 2,
            ProblemSpec::LogReg { .. } => 1,
            ProblemSpec::ConstantGradient { gradient } => gradient.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            ProblemSpec::Quadratic { c_x, c_y, .. } => QuadraticTask::new(*c_x, *c_y).map(|_| ()),
            ProblemSpec::LogReg {
                sparsity,
                n_train,
                n_test,
            } => LogRegTask {
                sparsity: *sparsity,
                n_train: *n_train,
                n_test: *n_test,
            }
            .validate(),
            ProblemSpec::ConstantGradient { gradient } => Vector::new(gradient.clone()).map(|_| ()),
        }
    }
}

/// Which optimizer processes the gradient stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// SGD with momentum on raw averaged gradients.
    Sgd,
    /// Adam on raw averaged gradients.
    Adam,
    /// AdaGrad on raw averaged gradients.
    Adagrad,
    /// Clipped noisy gradients into SGD with momentum.
    DpSgd,
    AdamPp,
    AdamIme,
    AdamBc,
    AdamStp,
    AdamSide,
    AdamStpSide,
    AdagradPp,
    AdagradIme,
}

pub const ALL_VARIANTS: [Variant; 12] = [
    Variant::Sgd,
    Variant::Adam,
    Variant::Adagrad,
    Variant::DpSgd,
    Variant::AdamPp,
    Variant::AdamIme,
    Variant::AdamBc,
    Variant::AdamStp,
    Variant::AdamSide,
    Variant::AdamStpSide,
    Variant::AdagradPp,
    Variant::AdagradIme,
];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Adam => "adam",
            Variant::Adagrad => "adagrad",
            Variant::DpSgd => "dp-sgd",
            Variant::AdamPp => "adam-pp",
            Variant::AdamIme => "adam-ime",
            Variant::AdamBc => "adam-bc",
            Variant::AdamStp => "adam-stp",
            Variant::AdamSide => "adam-side",
            Variant::AdamStpSide => "adam-stp-side",
            Variant::AdagradPp => "adagrad-pp",
            Variant::AdagradIme => "adagrad-ime",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        ALL_VARIANTS
            .iter()
            .copied()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let valid: Vec<&str> = ALL_VARIANTS.iter().map(|v| v.name()).collect();
                Error::validation(format!(
                    "unknown variant '{name}'; valid variants: {}",
                    valid.join(", ")
                ))
            })
    }

    pub fn is_private(&self) -> bool {
        !matches!(self, Variant::Sgd | Variant::Adam | Variant::Adagrad)
    }

    /// The noiseless run used when tuning targets the shared baseline.
    fn baseline(&self) -> Variant {
        match self {
            Variant::Sgd | Variant::DpSgd => Variant::DpSgd,
            Variant::Adagrad | Variant::AdagradPp | Variant::AdagradIme => Variant::AdagradPp,
            _ => Variant::AdamPp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningTarget {
    /// Tune the variant on its own noisy runs.
    SelfVariant,
    /// Tune once on the family's noiseless baseline (shared learning rate).
    NoiselessBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningGrid {
    pub etas: Vec<f64>,
    /// Optional stability-constant grid; empty keeps the spec's value.
    #[serde(default)]
    pub eps_s: Vec<f64>,
    pub target: TuningTarget,
    /// Smallest learning rate within this tolerance of the best tuning
    /// loss wins (guards against flat landscapes selecting huge steps).
    #[serde(default)]
    pub tolerance: f64,
}

impl TuningGrid {
    pub fn log_spaced(lo: f64, hi: f64, points: usize) -> Vec<f64> {
        if points == 1 {
            return vec![lo];
        }
        (0..points)
            .map(|i| {
                let f = i as f64 / (points - 1) as f64;
                10f64.powf(lo.log10() + f * (hi.log10() - lo.log10()))
            })
            .collect()
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: ProblemSpec,
    pub variant: Variant,
    pub privacy: PrivacyParams,
    pub hyper: HyperParams,
    pub correlation: NoiseCorrelation,
    /// Multiply sigma by the max column norm of the implied strategy
    /// matrix so the noise multiplier stays comparable across correlations.
    #[serde(default)]
    pub rescale_sigma_by_sensitivity: bool,
    pub rounds: u64,
    pub trials: u64,
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningGrid>,
    /// Retain the per-round normalized second moment of every trial.
    #[serde(default)]
    pub record_nu_trace: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.privacy.validate()?;
        self.hyper.validate()?;
        self.correlation.validate()?;
        if self.trials == 0 {
            return Err(Error::validation("trials must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::validation("rounds must be >= 1"));
        }
        if self.variant.is_private() && self.rounds > self.correlation.horizon() {
            return Err(Error::validation(format!(
                "rounds {} exceed correlation horizon {}",
                self.rounds,
                self.correlation.horizon()
            )));
        }
        if let Some(t) = &self.tuning {
            if t.etas.is_empty() {
                return Err(Error::validation("tuning grid must be non-empty"));
            }
        }
        Ok(())
    }

    /// The noise multiplier actually used by the streams.
    pub fn sigma_used(&self) -> f64 {
        if self.rescale_sigma_by_sensitivity {
            self.privacy.noise_mult * self.correlation.max_col_norm_of_inverse()
        } else {
            self.privacy.noise_mult
        }
    }
}

/// Per-round diagnostics of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub train_loss: f64,
    /// `||g_t||_2 / zeta` of the averaged clipped gradient.
    pub grad_norm_ratio: f64,
    /// Fraction of coordinates with negative corrected second moment.
    pub neg_fraction: f64,
    /// min / q25 / median / q75 / max of the normalized second moment.
    pub nu_quantiles: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: u64,
    pub seed: u64,
    pub final_loss: f64,
    pub diverged: bool,
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub rounds: Vec<RoundMetrics>,
    #[serde(skip)]
    pub nu_trace: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: u64,
    pub diverged: u64,
    /// Mean and sample standard deviation of final losses over the
    /// non-diverged trials.
    pub mean_final_loss: f64,
    pub sd_final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub sigma_used: f64,
    pub aggregate: Aggregate,
    pub per_trial: Vec<TrialResult>,
}

/// Noise-lane block: final runs and tuning runs must not share seeds.
#[derive(Clone, Copy)]
enum SeedBlock {
    Final,
    Tuning,
}

fn noise_seed(spec: &ExperimentSpec, block: SeedBlock, trial: u64, which: u64) -> u64 {
    let trial_seed = spec.base_seed.wrapping_add(trial);
    match block {
        SeedBlock::Final => lane(trial_seed, &[which]),
        SeedBlock::Tuning => lane(trial_seed, &[tag::TUNING_BLOCK, which]),
    }
}

/// The per-round data feed for one trial.
#[allow(clippy::large_enum_variant)]
enum DataFeed {
    Quadratic {
        task: QuadraticTask,
        rng: ChaCha8Rng,
        batch_size: usize,
        examples: Vec<(f64, f64)>,
    },
    LogReg {
        train: Vec<(f64, f64)>,
        test: Vec<(f64, f64)>,
        batch_size: usize,
        cursor: usize,
        current: Vec<(f64, f64)>,
    },
    Constant {
        gradient: Vector,
        batch_size: usize,
    },
}

impl DataFeed {
    fn new(spec: &ExperimentSpec) -> Result<DataFeed> {
        let b = spec.privacy.batch_size;
        match &spec.problem {
            ProblemSpec::Quadratic {
                c_x,
                c_y,
                rescaled_noise,
            } => {
                let task = match rescaled_noise {
                    Some(s) => QuadraticTask::with_rescaled_covariance(*c_x, *c_y, *s)?,
                    None => QuadraticTask::new(*c_x, *c_y)?,
                };
                Ok(DataFeed::Quadratic {
                    task,
                    rng: ChaCha8Rng::seed_from_u64(lane(spec.base_seed, &[tag::DATA_TRAIN])),
                    batch_size: b,
                    examples: Vec::new(),
                })
            }
            ProblemSpec::LogReg {
                sparsity,
                n_train,
                n_test,
            } => {
                let task = LogRegTask {
                    sparsity: *sparsity,
                    n_train: *n_train,
                    n_test: *n_test,
                };
                task.validate()?;
                Ok(DataFeed::LogReg {
                    train: task.train_set(lane(spec.base_seed, &[tag::DATA_TRAIN])),
                    test: task.test_set(lane(spec.base_seed, &[tag::DATA_TEST])),
                    batch_size: b,
                    cursor: 0,
                    current: Vec::new(),
                })
            }
            ProblemSpec::ConstantGradient { gradient } => Ok(DataFeed::Constant {
                gradient: Vector::new(gradient.clone())?,
                batch_size: b,
            }),
        }
    }

    /// Per-example gradients at `theta`, plus the batch's mean train loss.
    fn next_batch(&mut self, theta: &Vector) -> Result<(GradBatch, f64)> {
        match self {
            DataFeed::Quadratic {
                task,
                rng,
                batch_size,
                examples,
            } => {
                examples.clear();
                for _ in 0..*batch_size {
                    examples.push(task.sample_example(rng));
                }
                let grads: Vec<Vector> = examples.iter().map(|ex| task.grad(theta, *ex)).collect();
                let loss = examples.iter().map(|ex| task.loss(theta, *ex)).sum::<f64>()
                    / *batch_size as f64;
                Ok((GradBatch::new(grads)?, loss))
            }
            DataFeed::LogReg {
                train,
                batch_size,
                cursor,
                current,
                ..
            } => {
                current.clear();
                for _ in 0..*batch_size {
                    current.push(train[*cursor % train.len()]);
                    *cursor += 1;
                }
                let mut grads = Vec::with_capacity(*batch_size);
                let mut loss = 0.0;
                for ex in current.iter() {
                    let (l, g) = logreg_loss_grad(theta[0], *ex);
                    loss += l;
                    grads.push(Vector::new(vec![g])?);
                }
                Ok((GradBatch::new(grads)?, loss / *batch_size as f64))
            }
            DataFeed::Constant {
                gradient,
                batch_size,
            } => {
                let loss = gradient
                    .iter()
                    .zip(theta.iter())
                    .map(|(g, t)| g * t)
                    .sum::<f64>();
                Ok((GradBatch::replicated(gradient.clone(), *batch_size)?, loss))
            }
        }
    }

    fn final_loss(&self, theta: &Vector) -> f64 {
        match self {
            DataFeed::Quadratic { task, .. } => task.expected_loss(theta),
            DataFeed::LogReg { test, .. } => test_loss(theta[0], test),
            DataFeed::Constant { gradient, .. } => gradient
                .iter()
                .zip(theta.iter())
                .map(|(g, t)| g * t)
                .sum::<f64>(),
        }
    }
}

/// Noiseless shadow preconditioner for the side-information variants.
struct Shadow {
    nu: Vector,
    prev_nu_hat: Vector,
    beta2: f64,
    eps_s1: f64,
}

impl Shadow {
    fn new(dim: usize, hyper: &HyperParams) -> Shadow {
        Shadow {
            nu: Vector::zeros(dim),
            prev_nu_hat: Vector::zeros(dim),
            beta2: hyper.beta2,
            eps_s1: hyper.eps_s1,
        }
    }

    /// Advances on the round's noiseless clipped gradients and returns
    /// (previous, current) normalized values.
    fn advance(
        &mut self,
        batch: &GradBatch,
        privacy: &PrivacyParams,
        t: u64,
        scaled: bool,
    ) -> Result<(Vector, Vector)> {
        let prev = self.prev_nu_hat.clone();
        let g = if scaled {
            let denom = prev.sqrt().add_scalar(self.eps_s1);
            let scale = Vector::constant(prev.dim(), 1.0).div(&denom);
            average_clipped(batch, privacy.clip_norm, Some(&scale))?.div(&scale)
        } else {
            average_clipped(batch, privacy.clip_norm, None)?
        };
        self.nu = self
            .nu
            .scale(self.beta2)
            .add(&g.square().scale(1.0 - self.beta2));
        let nu_hat = self
            .nu
            .scale(1.0 / (1.0 - crate::optim::beta_pow(self.beta2, t)));
        self.prev_nu_hat = nu_hat.clone();
        Ok((prev, nu_hat))
    }
}

fn quantiles(values: &Vector) -> [f64; 5] {
    let mut v: Vec<f64> = values.as_slice().to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |f: f64| -> f64 {
        let idx = (f * (v.len() - 1) as f64).round() as usize;
        v[idx]
    };
    [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)]
}

fn run_trial(spec: &ExperimentSpec, block: SeedBlock, trial: u64) -> Result<TrialResult> {
    let dim = spec.problem.dim();
    let sigma = spec.sigma_used();
    let mut feed = DataFeed::new(spec)?;
    let unit = spec.privacy.sensitivity_scale();
    let mut noise = NoiseStream::new(
        spec.correlation.clone(),
        sigma,
        unit,
        dim,
        noise_seed(spec, block, trial, tag::NOISE_PRIMARY),
    )?;
    let mut noise2 = NoiseStream::new(
        spec.correlation.clone(),
        sigma,
        unit,
        dim,
        noise_seed(spec, block, trial, tag::NOISE_SECOND),
    )?;
    // per-round bias of the normalized second moment, for the corrected
    // negativity diagnostic and the bias-corrected variant itself
    let bias_seq = if spec.variant.is_private() {
        analysis::mf_nu_bias_sequence(
            &spec.correlation,
            spec.hyper.beta2,
            spec.rounds,
            spec.privacy.clip_norm,
            sigma,
            spec.privacy.batch_size,
        )?
    } else {
        vec![0.0; spec.rounds as usize]
    };

    let mut state = OptimizerState::new(Vector::zeros(dim), spec.hyper)?;
    let mut shadow = Shadow::new(dim, &spec.hyper);
    let mut rounds_out = Vec::with_capacity(spec.rounds as usize);
    let mut nu_trace = spec
        .record_nu_trace
        .then(|| Vec::with_capacity(spec.rounds as usize));
    let mut diverged = false;

    for t in 1..=spec.rounds {
        let (batch, train_loss) = feed.next_batch(&state.theta)?;
        let bias_t = bias_seq[t as usize - 1];
        let outcome: StepOutcome = match spec.variant {
            Variant::Sgd => {
                let g = plain_average(&batch);
                let next = optim::sgd_momentum_step(&state, &g)?;
                plain_outcome(next, &g)
            }
            Variant::Adam => {
                let g = plain_average(&batch);
                let next = optim::adam_step(&state, &g)?;
                plain_outcome(next, &g)
            }
            Variant::Adagrad => {
                let g = plain_average(&batch);
                let next = optim::adagrad_step(&state, &g)?;
                plain_outcome(next, &g)
            }
            Variant::DpSgd => optim::dp_sgd_step(&state, &batch, &mut noise, &spec.privacy)?,
            Variant::AdamPp => {
                optim::dp_postprocess_step(&state, &batch, &mut noise, &spec.privacy)?
            }
            Variant::AdamIme => {
                optim::dp_ime_step(&state, &batch, &mut noise, &mut noise2, &spec.privacy)?
            }
            Variant::AdamBc => {
                let mf_bias = (!spec.correlation.is_identity()).then_some(bias_t);
                optim::dp_biascorrect_step(&state, &batch, &mut noise, &spec.privacy, mf_bias)?
            }
            Variant::AdamStp => optim::dp_stp_step(&state, &batch, &mut noise, &spec.privacy)?,
            Variant::AdamSide => {
                let (_, nu_ext) = shadow.advance(&batch, &spec.privacy, t, false)?;
                optim::dp_sideinfo_step(&state, &batch, &mut noise, &spec.privacy, &nu_ext)?
            }
            Variant::AdamStpSide => {
                let (prev, nu_ext) = shadow.advance(&batch, &spec.privacy, t, true)?;
                optim::dp_stp_sideinfo_step(
                    &state,
                    &batch,
                    &mut noise,
                    &spec.privacy,
                    &prev,
                    &nu_ext,
                )?
            }
            Variant::AdagradPp => {
                optim::dp_adagrad_pp_step(&state, &batch, &mut noise, &spec.privacy)?
            }
            Variant::AdagradIme => {
                optim::dp_adagrad_ime_step(&state, &batch, &mut noise, &mut noise2, &spec.privacy)?
            }
        };
        state = outcome.state;

        let corrected_bias = match spec.variant {
            Variant::AdamBc => bias_t,
            _ => 0.0,
        };
        let neg_fraction = negative_fraction(outcome.nu_hat.as_slice(), corrected_bias);
        rounds_out.push(RoundMetrics {
            round: t,
            train_loss,
            grad_norm_ratio: outcome.clipped_norm / spec.privacy.clip_norm,
            neg_fraction,
            nu_quantiles: quantiles(&outcome.nu_hat),
        });
        if let Some(trace) = nu_trace.as_mut() {
            trace.push(outcome.nu_hat.as_slice().to_vec());
        }
        if !state.theta.is_finite() {
            diverged = true;
            break;
        }
    }

    let final_loss = if diverged {
        f64::NAN
    } else {
        feed.final_loss(&state.theta)
    };
    Ok(TrialResult {
        trial,
        seed: spec.base_seed.wrapping_add(trial),
        final_loss,
        diverged,
        theta: state.theta.as_slice().to_vec(),
        rounds: rounds_out,
        nu_trace,
    })
}

fn plain_average(batch: &GradBatch) -> Vector {
    let mut acc = Vector::zeros(batch.dim());
    for g in batch.grads() {
        acc = acc.add(g);
    }
    acc.scale(1.0 / batch.batch_size() as f64)
}

fn plain_outcome(state: OptimizerState, g: &Vector) -> StepOutcome {
    let nu_hat = state.nu_hat();
    StepOutcome {
        clipped_norm: g.norm2(),
        state,
        nu_hat,
    }
}

/// Fraction of coordinates whose corrected second moment is negative.
pub fn negative_fraction(nu_hat: &[f64], bias: f64) -> f64 {
    let neg = nu_hat.iter().filter(|v| **v - bias < 0.0).count();
    neg as f64 / nu_hat.len() as f64
}

fn aggregate(trials: &[TrialResult]) -> Aggregate {
    let finite: Vec<f64> = trials
        .iter()
        .filter(|t| !t.diverged)
        .map(|t| t.final_loss)
        .collect();
    let n = finite.len() as f64;
    let mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / n
    };
    let sd = if finite.len() > 1 {
        (finite.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Aggregate {
        trials: trials.len() as u64,
        diverged: trials.iter().filter(|t| t.diverged).count() as u64,
        mean_final_loss: mean,
        sd_final_loss: sd,
    }
}

fn run_block(spec: &ExperimentSpec, block: SeedBlock, workers: usize) -> Result<ExperimentResult> {
    spec.validate()?;
    let run = || -> Result<Vec<TrialResult>> {
        (0..spec.trials)
            .into_par_iter()
            .map(|trial| run_trial(spec, block, trial))
            .collect()
    };
    let per_trial = if workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(run)?
    } else {
        run()?
    };
    Ok(ExperimentResult {
        spec: spec.clone(),
        sigma_used: spec.sigma_used(),
        aggregate: aggregate(&per_trial),
        per_trial,
    })
}

/// Runs `spec.trials` independent trials and aggregates final losses.
pub fn run_trials(spec: &ExperimentSpec, workers: usize) -> Result<ExperimentResult> {
    run_block(spec, SeedBlock::Final, workers)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub eta: f64,
    pub eps_s: f64,
    pub mean_loss: f64,
    pub diverged: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneOutcome {
    pub grid: Vec<GridPoint>,
    pub winner_eta: f64,
    pub winner_eps_s: f64,
    /// The winner sat on the boundary of the learning-rate grid.
    pub edge_of_grid: bool,
    pub result: ExperimentResult,
}

/// Grid-tunes per the spec's `tuning` block, then re-runs the winner on
/// the final seed block.
pub fn tune(spec: &ExperimentSpec, workers: usize) -> Result<TuneOutcome> {
    spec.validate()?;
    let grid_cfg = spec
        .tuning
        .clone()
        .ok_or_else(|| Error::config("tune called without a tuning grid"))?;
    let eps_grid = if grid_cfg.eps_s.is_empty() {
        vec![spec.hyper.eps_s]
    } else {
        grid_cfg.eps_s.clone()
    };

    let mut tuning_spec = spec.clone();
    tuning_spec.record_nu_trace = false;
    if grid_cfg.target == TuningTarget::NoiselessBaseline {
        tuning_spec.variant = spec.variant.baseline();
        tuning_spec.privacy.noise_mult = 0.0;
    }

    let mut grid = Vec::new();
    for &eps in &eps_grid {
        for &eta in &grid_cfg.etas {
            let mut point = tuning_spec.clone();
            point.hyper.eta = eta;
            point.hyper.eps_s = eps;
            let res = run_block(&point, SeedBlock::Tuning, workers)?;
            grid.push(GridPoint {
                eta,
                eps_s: eps,
                mean_loss: res.aggregate.mean_final_loss,
                diverged: res.aggregate.diverged,
            });
        }
    }

    let best = grid
        .iter()
        .map(|p| p.mean_loss)
        .filter(|m| m.is_finite())
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::config("every tuning point diverged"));
    }
    // smallest learning rate within tolerance of the best loss
    let mut candidates: Vec<&GridPoint> = grid
        .iter()
        .filter(|p| p.mean_loss.is_finite() && p.mean_loss <= best + grid_cfg.tolerance)
        .collect();
    candidates.sort_by(|a, b| {
        (a.eta, a.eps_s, a.mean_loss)
            .partial_cmp(&(b.eta, b.eps_s, b.mean_loss))
            .unwrap()
    });
    let winner = candidates[0];
    let (winner_eta, winner_eps_s) = (winner.eta, winner.eps_s);
    let eta_lo = grid_cfg.etas.iter().cloned().fold(f64::INFINITY, f64::min);
    let eta_hi = grid_cfg
        .etas
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let edge_of_grid = grid_cfg.etas.len() > 1 && (winner_eta == eta_lo || winner_eta == eta_hi);

    let mut final_spec = spec.clone();
    final_spec.hyper.eta = winner_eta;
    final_spec.hyper.eps_s = winner_eps_s;
    let result = run_block(&final_spec, SeedBlock::Final, workers)?;
    Ok(TuneOutcome {
        grid,
        winner_eta,
        winner_eps_s,
        edge_of_grid,
        result,
    })
}

/// Canned experiment configurations.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 3] = ["logreg-1d", "quadratic-2d", "constant-gradient"];

    /// Sparse 1-D logistic regression, single epoch, batch size 1,
    /// clip 1, noise multiplier 0.1, correlated noise optimized for
    /// single-epoch prefix sums, learning rate tuned on the noiseless
    /// baseline.
    pub fn logreg_1d() -> Result<ExperimentSpec> {
        let opt = crate::noise::optimize_banded(1000, 8, true)?;
        Ok(ExperimentSpec {
            problem: ProblemSpec::LogReg {
                sparsity: 0.9,
                n_train: 1000,
                n_test: 10_000,
            },
            variant: Variant::AdagradPp,
            privacy: PrivacyParams::new(1.0, 0.1, 1)?,
            hyper: HyperParams {
                eta: 0.1,
                beta1: 0.0,
                beta2: 0.999,
                eps_s: 0.0,
                ..HyperParams::default()
            },
            correlation: opt.correlation,
            rescale_sigma_by_sensitivity: true,
            rounds: 1000,
            trials: 30,
            base_seed: 12,
            tuning: Some(TuningGrid {
                etas: TuningGrid::log_spaced(1e-2, 1.0, 17),
                eps_s: vec![],
                target: TuningTarget::NoiselessBaseline,
                tolerance: 5e-4,
            }),
            record_nu_trace: false,
        })
    }

    /// Two-dimensional quadratic with mismatched curvatures and
    /// per-coordinate noise of magnitude 1.
    pub fn quadratic_2d() -> Result<ExperimentSpec> {
        Ok(ExperimentSpec {
            problem: ProblemSpec::Quadratic {
                c_x: 2.0,
                c_y: 0.1,
                rescaled_noise: None,
            },
            variant: Variant::AdamPp,
            privacy: PrivacyParams::new(20.0, 0.05, 1)?,
            hyper: HyperParams {
                eta: 1e-3,
                ..HyperParams::default()
            },
            correlation: NoiseCorrelation::identity(3000),
            rescale_sigma_by_sensitivity: false,
            rounds: 3000,
            trials: 5,
            base_seed: 1,
            tuning: None,
            record_nu_trace: false,
        })
    }

    /// Constant per-example gradient; the bias and steady-state
    /// verification workhorse.
    pub fn constant_gradient() -> Result<ExperimentSpec> {
        Ok(ExperimentSpec {
            problem: ProblemSpec::ConstantGradient {
                gradient: vec![0.5],
            },
            variant: Variant::AdamPp,
            privacy: PrivacyParams::new(1.0, 1.0, 4)?,
            hyper: HyperParams {
                eta: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps_s: 1e-8,
                ..HyperParams::default()
            },
            correlation: NoiseCorrelation::identity(100),
            rescale_sigma_by_sensitivity: false,
            rounds: 100,
            trials: 1000,
            base_seed: 1,
            tuning: None,
            record_nu_trace: false,
        })
    }

    pub fn by_name(name: &str) -> Result<ExperimentSpec> {
        match name {
            "logreg-1d" => logreg_1d(),
            "quadratic-2d" => quadratic_2d(),
            "constant-gradient" => constant_gradient(),
            _ => Err(Error::validation(format!(
                "unknown preset '{name}'; valid presets: {}",
                NAMES.join(", ")
            ))),
        }
    }
}

/// Result-file writers. Every file embeds the resolved configuration.
pub mod output {
    use super::*;

    fn config_comment(result: &ExperimentResult) -> Result<String> {
        let mut resolved = serde_json::to_value(&result.spec)?;
        resolved["sigma_used"] = serde_json::json!(result.sigma_used);
        Ok(format!("# config: {resolved}"))
    }

    /// Long-format CSV: `trial,round,metric,value` (per-round diagnostics
    /// plus one `final_loss` and one `diverged` row per trial).
    pub fn write_results_csv(path: &Path, result: &ExperimentResult) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", config_comment(result)?)?;
        writeln!(file, "trial,round,metric,value")?;
        for trial in &result.per_trial {
            for r in &trial.rounds {
                let rows = [
                    ("train_loss", r.train_loss),
                    ("grad_norm_ratio", r.grad_norm_ratio),
                    ("neg_fraction", r.neg_fraction),
                    ("nu_min", r.nu_quantiles[0]),
                    ("nu_q25", r.nu_quantiles[1]),
                    ("nu_median", r.nu_quantiles[2]),
                    ("nu_q75", r.nu_quantiles[3]),
                    ("nu_max", r.nu_quantiles[4]),
                ];
                for (metric, value) in rows {
                    writeln!(file, "{},{},{},{:?}", trial.trial, r.round, metric, value)?;
                }
            }
            writeln!(
                file,
                "{},{},final_loss,{:?}",
                trial.trial, result.spec.rounds, trial.final_loss
            )?;
            writeln!(
                file,
                "{},{},diverged,{}",
                trial.trial,
                result.spec.rounds,
                u8::from(trial.diverged)
            )?;
        }
        Ok(())
    }

    /// Reads back a long-format CSV as `(trial, round, metric, value)`.
    pub fn read_results_csv(path: &Path) -> Result<Vec<(u64, u64, String, f64)>> {
        let content = std::fs::read_to_string(path)?;
        let mut out = Vec::new();
        for line in content.lines() {
            if line.starts_with('#') || line.starts_with("trial,") || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, ',').collect();
            if fields.len() != 4 {
                return Err(Error::validation(format!("malformed results row: {line}")));
            }
            out.push((
                fields[0]
                    .parse()
                    .map_err(|e| Error::validation(format!("bad trial: {e}")))?,
                fields[1]
                    .parse()
                    .map_err(|e| Error::validation(format!("bad round: {e}")))?,
                fields[2].to_string(),
                fields[3]
                    .parse()
                    .map_err(|e| Error::validation(format!("bad value: {e}")))?,
            ));
        }
        Ok(out)
    }

    pub fn write_summary_json(path: &Path, result: &ExperimentResult) -> Result<()> {
        let summary = serde_json::json!({
            "config": result.spec,
            "sigma_used": result.sigma_used,
            "aggregate": result.aggregate,
            "per_trial": result.per_trial,
        });
        std::fs::write(path, serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }

    /// Plot-data files for the three diagnostics: per-round negative
    /// fraction, per-round clipped-gradient norm ratio, and the final
    /// second-moment values against the bias term.
    pub fn write_plot_data(dir: &Path, result: &ExperimentResult) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let comment = config_comment(result)?;
        let rounds = result
            .per_trial
            .iter()
            .map(|t| t.rounds.len())
            .min()
            .unwrap_or(0);
        let n = result.per_trial.len() as f64;

        let mut neg = std::fs::File::create(dir.join("neg_fraction.csv"))?;
        let mut norm = std::fs::File::create(dir.join("grad_norm.csv"))?;
        writeln!(neg, "{comment}")?;
        writeln!(neg, "round,neg_fraction")?;
        writeln!(norm, "{comment}")?;
        writeln!(norm, "round,grad_norm_ratio")?;
        for r in 0..rounds {
            let mean_neg: f64 = result
                .per_trial
                .iter()
                .map(|t| t.rounds[r].neg_fraction)
                .sum::<f64>()
                / n;
            let mean_norm: f64 = result
                .per_trial
                .iter()
                .map(|t| t.rounds[r].grad_norm_ratio)
                .sum::<f64>()
                / n;
            writeln!(neg, "{},{:?}", r + 1, mean_neg)?;
            writeln!(norm, "{},{:?}", r + 1, mean_norm)?;
        }

        let bias = analysis::iid_nu_hat_bias(
            result.spec.privacy.clip_norm,
            result.sigma_used,
            result.spec.privacy.batch_size,
        );
        let mut nu = std::fs::File::create(dir.join("nu_vs_bias.csv"))?;
        writeln!(nu, "{comment}")?;
        writeln!(nu, "rank,nu_hat,bias_term")?;
        if let Some(first) = result.per_trial.first() {
            if let Some(trace) = &first.nu_trace {
                if let Some(final_nu) = trace.last() {
                    let mut sorted = final_nu.clone();
                    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    for (rank, v) in sorted.iter().enumerate() {
                        writeln!(nu, "{rank},{v:?},{bias:?}")?;
                    }
                }
            } else if let Some(last) = first.rounds.last() {
                // quantile summary stands in for the full coordinate set
                for (rank, v) in last.nu_quantiles.iter().enumerate() {
                    writeln!(nu, "{rank},{v:?},{bias:?}")?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(variant: Variant) -> ExperimentSpec {
        ExperimentSpec {
            problem: ProblemSpec::ConstantGradient {
                gradient: vec![0.4, -0.2],
            },
            variant,
            privacy: PrivacyParams::new(1.0, 0.5, 2).unwrap(),
            hyper: HyperParams {
                eta: 0.05,
                ..HyperParams::default()
            },
            correlation: NoiseCorrelation::identity(20),
            rescale_sigma_by_sensitivity: false,
            rounds: 20,
            trials: 4,
            base_seed: 7,
            tuning: None,
            record_nu_trace: false,
        }
    }

    #[test]
    fn sigma_zero_trials_are_identical() {
        let mut spec = tiny_spec(Variant::AdamPp);
        spec.privacy.noise_mult = 0.0;
        let res = run_trials(&spec, 0).unwrap();
        assert_eq!(res.aggregate.sd_final_loss, 0.0);
        for t in &res.per_trial {
            assert_eq!(t.final_loss, res.per_trial[0].final_loss);
        }
    }

    #[test]
    fn reruns_and_worker_counts_are_bit_identical() {
        let spec = tiny_spec(Variant::AdamIme);
        let a = run_trials(&spec, 0).unwrap();
        let b = run_trials(&spec, 1).unwrap();
        let c = run_trials(&spec, 4).unwrap();
        for ((x, y), z) in a.per_trial.iter().zip(&b.per_trial).zip(&c.per_trial) {
            assert_eq!(x.final_loss, y.final_loss);
            assert_eq!(x.theta, z.theta);
            assert_eq!(x.rounds, y.rounds);
        }
    }

    #[test]
    fn every_variant_runs() {
        for variant in ALL_VARIANTS {
            let mut spec = tiny_spec(variant);
            spec.trials = 2;
            let res = run_trials(&spec, 0).unwrap();
            assert_eq!(res.per_trial.len(), 2);
            assert_eq!(res.aggregate.diverged, 0, "{variant:?}");
            assert!(res.aggregate.mean_final_loss.is_finite(), "{variant:?}");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        let err = Variant::parse("nope").unwrap_err().to_string();
        assert!(err.contains("adam-stp"), "{err}");
    }

    #[test]
    fn single_point_grid_tune_equals_run() {
        let mut spec = tiny_spec(Variant::AdamPp);
        spec.hyper.eta = 0.05;
        spec.tuning = Some(TuningGrid {
            etas: vec![0.05],
            eps_s: vec![],
            target: TuningTarget::SelfVariant,
            tolerance: 0.0,
        });
        let tuned = tune(&spec, 0).unwrap();
        let plain = run_trials(&spec, 0).unwrap();
        assert_eq!(
            tuned.result.aggregate.mean_final_loss,
            plain.aggregate.mean_final_loss
        );
        assert_eq!(tuned.winner_eta, 0.05);
    }

    #[test]
    fn tune_winner_is_no_worse_on_selection_block() {
        let mut spec = tiny_spec(Variant::AdamPp);
        spec.tuning = Some(TuningGrid {
            etas: vec![0.05, 0.1],
            eps_s: vec![],
            target: TuningTarget::SelfVariant,
            tolerance: 0.0,
        });
        let tuned = tune(&spec, 0).unwrap();
        let winner = tuned
            .grid
            .iter()
            .find(|p| p.eta == tuned.winner_eta)
            .unwrap();
        for p in &tuned.grid {
            assert!(winner.mean_loss <= p.mean_loss);
        }
    }

    #[test]
    fn diagnostics_norm_ratio_extremes() {
        // identical unit-norm per-example gradients: ratio 1
        let g = Vector::new(vec![1.0, 0.0]).unwrap();
        let batch = GradBatch::replicated(g, 4).unwrap();
        let avg = average_clipped(&batch, 1.0, None).unwrap();
        assert!((avg.norm2() - 1.0).abs() < 1e-12);
        // orthogonal unit gradients: ratio 1/sqrt(B)
        let batch = GradBatch::new(vec![
            Vector::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Vector::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
            Vector::new(vec![0.0, 0.0, 1.0, 0.0]).unwrap(),
            Vector::new(vec![0.0, 0.0, 0.0, 1.0]).unwrap(),
        ])
        .unwrap();
        let avg = average_clipped(&batch, 1.0, None).unwrap();
        assert!((avg.norm2() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_preserves_aggregate() {
        let dir = std::env::temp_dir();
        let path = dir.join("dpopt_results_test.csv");
        let spec = tiny_spec(Variant::AdamBc);
        let res = run_trials(&spec, 0).unwrap();
        output::write_results_csv(&path, &res).unwrap();
        let rows = output::read_results_csv(&path).unwrap();
        let finals: Vec<f64> = rows
            .iter()
            .filter(|(_, _, m, _)| m == "final_loss")
            .map(|(_, _, _, v)| *v)
            .collect();
        assert_eq!(finals.len(), res.per_trial.len());
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        assert_eq!(mean, res.aggregate.mean_final_loss);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn recorded_nu_trace_matches_negative_fraction() {
        let mut spec = tiny_spec(Variant::AdamIme);
        spec.record_nu_trace = true;
        spec.privacy.noise_mult = 3.0;
        let res = run_trials(&spec, 0).unwrap();
        for trial in &res.per_trial {
            let trace = trial.nu_trace.as_ref().unwrap();
            for (r, nu) in trace.iter().enumerate() {
                let recount = negative_fraction(nu, 0.0);
                assert_eq!(recount, trial.rounds[r].neg_fraction);
            }
        }
    }

    #[test]
    fn presets_validate() {
        for name in presets::NAMES {
            let spec = presets::by_name(name).unwrap();
            spec.validate().unwrap();
        }
        assert!(presets::by_name("bogus").is_err());
    }
}
