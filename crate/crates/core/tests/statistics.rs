//! Monte-Carlo invariants that are too heavy for inline unit tests:
//! noise covariance, prefix-sum variance agreement, second-moment
//! unbiasedness, the negative-coordinate fraction, and the quadratic
//! preconditioner comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpopt_core::analysis;
use dpopt_core::harness::{self, presets, ProblemSpec, Variant};
use dpopt_core::noise::{optimize_banded, prefix_sum_variances, NoiseCorrelation, NoiseStream};
use dpopt_core::optim::{dp_biascorrect_step, dp_ime_step, HyperParams, OptimizerState};
use dpopt_core::seed::{lane, tag};
use dpopt_core::vector::{GradBatch, PrivacyParams, Vector};

/// Per-round covariance of the identity-correlation stream: diagonal
/// (zeta sigma / B)^2, off-diagonal zero, within 5 standard errors.
#[test]
fn identity_noise_covariance() {
    let dim = 4;
    let draws = 100_000u64;
    let unit = 0.5 * 1.5; // zeta/B = 0.5, sigma = 1.5
    let mut stream = NoiseStream::new(
        NoiseCorrelation::identity(draws),
        1.5,
        0.5,
        dim,
        99,
    )
    .unwrap();
    let mut sum = vec![0.0; dim];
    let mut cross = vec![vec![0.0; dim]; dim];
    for _ in 0..draws {
        let z = stream.next_noise().unwrap();
        for i in 0..dim {
            sum[i] += z[i];
            for j in 0..dim {
                cross[i][j] += z[i] * z[j];
            }
        }
    }
    let n = draws as f64;
    let var_target = unit * unit;
    for i in 0..dim {
        for j in 0..dim {
            let cov = cross[i][j] / n - (sum[i] / n) * (sum[j] / n);
            if i == j {
                let se = var_target * (2.0 / n).sqrt();
                assert!(
                    (cov - var_target).abs() <= 5.0 * se,
                    "diag {i}: {cov} vs {var_target}"
                );
            } else {
                let se = var_target / n.sqrt();
                assert!(cov.abs() <= 5.0 * se, "offdiag ({i},{j}): {cov}");
            }
        }
    }
}

/// Monte-Carlo prefix-sum variances match the exact matrix computation
/// within 5 standard errors, for a banded and an explicit correlation.
#[test]
fn prefix_sum_variance_monte_carlo() {
    let corrs = [
        NoiseCorrelation::banded(vec![1.0, -0.5, 0.125], 12).unwrap(),
        NoiseCorrelation::explicit(vec![
            vec![1.0],
            vec![-0.5, 1.0],
            vec![0.0, -0.5, 1.0],
        ])
        .unwrap(),
    ];
    for corr in corrs {
        let rounds = corr.horizon().min(12);
        let exact = prefix_sum_variances(&corr, rounds).unwrap();
        let replicas = 40_000u64;
        let mut sums = vec![0.0; rounds as usize];
        let mut sqs = vec![0.0; rounds as usize];
        for rep in 0..replicas {
            let mut stream = NoiseStream::new(corr.clone(), 1.0, 1.0, 1, 7_000 + rep).unwrap();
            let mut prefix = 0.0;
            for t in 0..rounds as usize {
                prefix += stream.next_noise().unwrap()[0];
                sums[t] += prefix;
                sqs[t] += prefix * prefix;
            }
        }
        let n = replicas as f64;
        for t in 0..rounds as usize {
            let mean = sums[t] / n;
            let var = (sqs[t] / n - mean * mean) * n / (n - 1.0);
            let se = exact[t] * (2.0 / n).sqrt();
            assert!(
                (var - exact[t]).abs() <= 5.0 * se,
                "t={}: {var} vs {}",
                t + 1,
                exact[t]
            );
        }
    }
}

/// The independently-noised second moment is unbiased: the Monte-Carlo
/// mean of the uncorrected estimate sits within 4 standard errors of the
/// noiseless value at t in {1, 10, 100}.
#[test]
fn ime_second_moment_is_unbiased() {
    let privacy = PrivacyParams::new(1.0, 1.0, 2).unwrap();
    let hyper = HyperParams {
        eta: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps_s: 1e-8,
        ..HyperParams::default()
    };
    let trials = 10_000u64;
    let g = 0.4;
    let nu_star = g * g;
    let batch = GradBatch::replicated(Vector::new(vec![g]).unwrap(), 2).unwrap();
    let checkpoints = [1u64, 10, 100];
    let mut sums = [0.0f64; 3];
    let mut sqs = [0.0f64; 3];
    for trial in 0..trials {
        let mut n1 = NoiseStream::new(
            NoiseCorrelation::identity(100),
            1.0,
            privacy.sensitivity_scale(),
            1,
            lane(50_000 + trial, &[tag::NOISE_PRIMARY]),
        )
        .unwrap();
        let mut n2 = NoiseStream::new(
            NoiseCorrelation::identity(100),
            1.0,
            privacy.sensitivity_scale(),
            1,
            lane(50_000 + trial, &[tag::NOISE_SECOND]),
        )
        .unwrap();
        let mut state = OptimizerState::new(Vector::zeros(1), hyper).unwrap();
        for t in 1..=100u64 {
            let out = dp_ime_step(&state, &batch, &mut n1, &mut n2, &privacy).unwrap();
            state = out.state;
            if let Some(i) = checkpoints.iter().position(|c| *c == t) {
                sums[i] += out.nu_hat[0];
                sqs[i] += out.nu_hat[0] * out.nu_hat[0];
            }
        }
    }
    for (i, t) in checkpoints.iter().enumerate() {
        let n = trials as f64;
        let mean = sums[i] / n;
        let var = (sqs[i] / n - mean * mean) * n / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            (mean - nu_star).abs() <= 4.0 * se,
            "t={t}: mean {mean} vs {nu_star} (se {se})"
        );
    }
}

/// Bias correction is unbiased after subtracting the known bias.
#[test]
fn bias_corrected_second_moment_is_unbiased() {
    let privacy = PrivacyParams::new(1.0, 1.0, 2).unwrap();
    let hyper = HyperParams {
        eta: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps_s: 1e-4,
        ..HyperParams::default()
    };
    let trials = 10_000u64;
    let g = 0.4;
    let bias = analysis::iid_nu_hat_bias(1.0, 1.0, 2);
    let batch = GradBatch::replicated(Vector::new(vec![g]).unwrap(), 2).unwrap();
    let mut sum = 0.0;
    let mut sq = 0.0;
    for trial in 0..trials {
        let mut noise = NoiseStream::new(
            NoiseCorrelation::identity(50),
            1.0,
            privacy.sensitivity_scale(),
            1,
            lane(60_000 + trial, &[tag::NOISE_PRIMARY]),
        )
        .unwrap();
        let mut state = OptimizerState::new(Vector::zeros(1), hyper).unwrap();
        let mut last = 0.0;
        for _ in 0..50 {
            let out = dp_biascorrect_step(&state, &batch, &mut noise, &privacy, None).unwrap();
            state = out.state;
            last = out.nu_hat[0] - bias;
        }
        sum += last;
        sq += last * last;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(
        (mean - g * g).abs() <= 4.0 * se,
        "corrected mean {mean} vs {} (se {se})",
        g * g
    );
}

/// With zero gradients and noise on the second moment, about half of the
/// independently-estimated coordinates are negative.
#[test]
fn ime_negative_fraction_near_half() {
    let privacy = PrivacyParams::new(1.0, 2.0, 1).unwrap();
    let hyper = HyperParams {
        eta: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps_s: 1e-4,
        ..HyperParams::default()
    };
    let dim = 500;
    let batch = GradBatch::replicated(Vector::zeros(dim), 1).unwrap();
    let mut neg = 0u64;
    let mut total = 0u64;
    for trial in 0..20u64 {
        let mut n1 = NoiseStream::new(
            NoiseCorrelation::identity(50),
            2.0,
            1.0,
            dim,
            lane(70_000 + trial, &[tag::NOISE_PRIMARY]),
        )
        .unwrap();
        let mut n2 = NoiseStream::new(
            NoiseCorrelation::identity(50),
            2.0,
            1.0,
            dim,
            lane(70_000 + trial, &[tag::NOISE_SECOND]),
        )
        .unwrap();
        let mut state = OptimizerState::new(Vector::zeros(dim), hyper).unwrap();
        for _ in 0..50 {
            let out = dp_ime_step(&state, &batch, &mut n1, &mut n2, &privacy).unwrap();
            state = out.state;
            neg += out.nu_hat.iter().filter(|v| **v < 0.0).count() as u64;
            total += dim as u64;
        }
    }
    let fraction = neg as f64 / total as f64;
    assert!(
        (0.45..=0.55).contains(&fraction),
        "negative fraction {fraction}"
    );
}

/// On the quadratic task with noise dominating the small curvature, the
/// noiseless-preconditioner variant keeps per-coordinate second moments
/// near (c_x^2, c_y^2) while post-processing inflates them to
/// (c_x^2 + s^2, c_y^2 + s^2); both within 10%.
#[test]
fn quadratic_preconditioner_rates() {
    let mut spec = presets::quadratic_2d().unwrap();
    spec.hyper.eta = 1e-7; // hold theta near the origin
    spec.rounds = 3000;
    spec.trials = 8;
    let (c_x, c_y) = match spec.problem {
        ProblemSpec::Quadratic { c_x, c_y, .. } => (c_x, c_y),
        _ => unreachable!(),
    };
    let s = spec.privacy.clip_norm * spec.privacy.noise_mult / spec.privacy.batch_size as f64;
    assert!(s > 5.0 * c_y, "noise should dominate the small curvature");

    let late_mean = |variant: Variant| -> (f64, f64) {
        let mut sp = spec.clone();
        sp.variant = variant;
        let res = harness::run_trials(&sp, 0).unwrap();
        let mut acc = [0.0f64; 2];
        let mut count = 0u64;
        for trial in &res.per_trial {
            for r in trial.rounds.iter().skip(2000) {
                // dim 2: quantiles[0] and [4] are the two coordinates
                let lo = r.nu_quantiles[0];
                let hi = r.nu_quantiles[4];
                acc[0] += hi; // x carries the larger curvature
                acc[1] += lo;
                count += 1;
            }
        }
        (acc[0] / count as f64, acc[1] / count as f64)
    };

    let (side_x, side_y) = late_mean(Variant::AdamSide);
    assert!(
        (side_x / (c_x * c_x) - 1.0).abs() <= 0.10,
        "side-info x: {side_x} vs {}",
        c_x * c_x
    );
    assert!(
        (side_y / (c_y * c_y) - 1.0).abs() <= 0.10,
        "side-info y: {side_y} vs {}",
        c_y * c_y
    );

    let (pp_x, pp_y) = late_mean(Variant::AdamPp);
    let want_x = c_x * c_x + s * s;
    let want_y = c_y * c_y + s * s;
    assert!(
        (pp_x / want_x - 1.0).abs() <= 0.10,
        "post-processing x: {pp_x} vs {want_x}"
    );
    assert!(
        (pp_y / want_y - 1.0).abs() <= 0.10,
        "post-processing y: {pp_y} vs {want_y}"
    );
}

/// More bands strictly improve the sensitivity-scaled RMSE objective.
#[test]
fn banded_objective_improves_with_bands() {
    let rounds = 2000;
    let b1 = optimize_banded(rounds, 1, false).unwrap();
    let b2 = optimize_banded(rounds, 2, false).unwrap();
    let b128 = optimize_banded(rounds, 128, false).unwrap();
    assert!(b2.converged && b128.converged);
    assert!(
        b1.objective > b2.objective && b2.objective > b128.objective,
        "objectives {} / {} / {}",
        b1.objective,
        b2.objective,
        b128.objective
    );
}

/// Divergence is recorded per trial, not fatal, and flagged in the
/// aggregate.
#[test]
fn divergence_is_recorded_not_fatal() {
    let spec = harness::ExperimentSpec {
        problem: ProblemSpec::ConstantGradient {
            gradient: vec![0.5],
        },
        variant: Variant::AdamIme,
        privacy: PrivacyParams::new(1.0, 1e6, 1).unwrap(),
        hyper: HyperParams {
            eta: 1e12, // deliberately unstable
            beta1: 0.0,
            beta2: 0.0,
            eps_s: 0.0,
            ..HyperParams::default()
        },
        correlation: NoiseCorrelation::identity(64),
        rescale_sigma_by_sensitivity: false,
        rounds: 64,
        trials: 3,
        base_seed: 3,
        tuning: None,
        record_nu_trace: false,
    };
    let res = harness::run_trials(&spec, 0).unwrap();
    // eta * mu-path noise overflows f64 almost surely within 64 rounds;
    // if not, the run still completes and reports zero divergences
    for t in &res.per_trial {
        if t.diverged {
            assert!(t.final_loss.is_nan());
        }
    }
    assert_eq!(
        res.aggregate.diverged,
        res.per_trial.iter().filter(|t| t.diverged).count() as u64
    );
}

/// Seeded data generation is reproducible and train/test lanes differ.
#[test]
fn data_lanes_are_disjoint_and_stable() {
    use dpopt_core::problems::LogRegTask;
    let task = LogRegTask::default();
    let a = task.train_set(lane(5, &[tag::DATA_TRAIN]));
    let b = task.train_set(lane(5, &[tag::DATA_TRAIN]));
    assert_eq!(a, b);
    let test = task.test_set(lane(5, &[tag::DATA_TEST]));
    assert_ne!(a[0], test[0]);
}

/// One post-processing step on a zero gradient with unit parameters:
/// the expected normalized second moment is sigma^2 = 1.
#[test]
fn postprocess_single_step_expectation() {
    let privacy = PrivacyParams::new(1.0, 1.0, 1).unwrap();
    let hyper = HyperParams::default();
    let batch = GradBatch::replicated(Vector::zeros(1), 1).unwrap();
    let trials = 20_000u64;
    let mut sum = 0.0;
    for trial in 0..trials {
        let mut noise = NoiseStream::new(
            NoiseCorrelation::identity(1),
            1.0,
            1.0,
            1,
            lane(80_000 + trial, &[tag::NOISE_PRIMARY]),
        )
        .unwrap();
        let state = OptimizerState::new(Vector::zeros(1), hyper).unwrap();
        let out = dpopt_core::optim::dp_postprocess_step(&state, &batch, &mut noise, &privacy)
            .unwrap();
        sum += out.nu_hat[0];
    }
    let mean = sum / trials as f64;
    // Var[z^2] = 2, so 4 se = 4 sqrt(2/N)
    let band = 4.0 * (2.0 / trials as f64).sqrt();
    assert!((mean - 1.0).abs() <= band, "mean {mean} vs 1.0 ({band})");
}

/// With a huge clipping-scale stability constant and no noise, nothing
/// clips after scaling and scale-then-privatize follows noiseless Adam
/// on the unclipped averaged gradients.
#[test]
fn stp_large_eps_limit_is_unclipped_adam() {
    let privacy = PrivacyParams::new(1.0, 0.0, 2).unwrap();
    let hyper = HyperParams {
        eta: 0.05,
        beta1: 0.9,
        beta2: 0.99,
        eps_s: 1e-8,
        eps_s1: 1e9,
        eps_s2: 1e-8,
        ime_scale_sigma: true,
    };
    let mut adam_hyper = hyper;
    adam_hyper.eps_s = hyper.eps_s2;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut noise = NoiseStream::new(NoiseCorrelation::identity(64), 0.0, 0.5, 3, 1).unwrap();
    let mut stp = OptimizerState::new(Vector::zeros(3), hyper).unwrap();
    let mut adam = OptimizerState::new(Vector::zeros(3), adam_hyper).unwrap();
    for t in 1..=50u64 {
        let grads: Vec<Vector> = (0..2)
            .map(|_| {
                Vector::new((0..3).map(|_| 4.0 * (rng.gen::<f64>() - 0.5)).collect()).unwrap()
            })
            .collect();
        let mut avg = Vector::zeros(3);
        for g in &grads {
            avg = avg.add(g);
        }
        let avg = avg.scale(0.5);
        let batch = GradBatch::new(grads).unwrap();
        stp = dpopt_core::optim::dp_stp_step(&stp, &batch, &mut noise, &privacy)
            .unwrap()
            .state;
        adam = dpopt_core::optim::adam_step(&adam, &avg).unwrap();
        for i in 0..3 {
            assert!(
                (stp.theta[i] - adam.theta[i]).abs() <= 1e-10 * (1.0 + adam.theta[i].abs()),
                "t={t} coord {i}: {} vs {}",
                stp.theta[i],
                adam.theta[i]
            );
        }
    }
}

/// The post-processing second moment never goes negative (it averages
/// squares).
#[test]
fn postprocess_nu_stays_nonnegative() {
    let privacy = PrivacyParams::new(1.0, 3.0, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut noise = NoiseStream::new(NoiseCorrelation::identity(256), 3.0, 0.5, 4, 2).unwrap();
    let mut state = OptimizerState::new(Vector::zeros(4), HyperParams::default()).unwrap();
    for _ in 0..256 {
        let grads: Vec<Vector> = (0..2)
            .map(|_| {
                Vector::new((0..4).map(|_| 4.0 * (rng.gen::<f64>() - 0.5)).collect()).unwrap()
            })
            .collect();
        let batch = GradBatch::new(grads).unwrap();
        let out =
            dpopt_core::optim::dp_postprocess_step(&state, &batch, &mut noise, &privacy).unwrap();
        state = out.state;
        assert!(out.nu_hat.min_entry() >= 0.0);
        assert!(state.nu.min_entry() >= 0.0);
    }
}

/// The preset's seeded test set evaluates the ground-truth model close
/// to the reference value.
#[test]
fn preset_ground_truth_anchor() {
    use dpopt_core::problems::{test_loss, LogRegTask};
    let spec = presets::logreg_1d().unwrap();
    let test = LogRegTask::default().test_set(lane(spec.base_seed, &[tag::DATA_TEST]));
    let gt = test_loss(1.0, &test);
    assert!((gt - 0.5976).abs() <= 0.003, "ground truth {gt}");
}

/// Random spot check that a correlated stream's emission matches the
/// definition applied to the raw draws of a twin identity stream.
#[test]
fn correlated_stream_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let bands = rng.gen_range(1..5usize);
        let coeffs: Vec<f64> = std::iter::once(1.0)
            .chain((1..bands).map(|_| rng.gen::<f64>() - 0.5))
            .collect();
        let horizon = 12u64;
        let corr = NoiseCorrelation::banded(coeffs.clone(), horizon).unwrap();
        let seed = rng.gen();
        let unit = 0.7;
        let mut stream = NoiseStream::new(corr, 1.0, unit, 3, seed).unwrap();
        let mut raw = NoiseStream::new(NoiseCorrelation::identity(horizon), 1.0, 1.0, 3, seed).unwrap();
        let mut zs: Vec<Vector> = Vec::new();
        for t in 0..horizon {
            zs.push(raw.next_noise().unwrap());
            let got = stream.next_noise().unwrap();
            for i in 0..3 {
                let mut want = 0.0;
                for (lag, c) in coeffs.iter().enumerate() {
                    if t as usize >= lag {
                        want += c * zs[t as usize - lag][i];
                    }
                }
                want *= unit;
                assert!((got[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}
