//! Command-line front end: config-driven experiment runs, hyperparameter
//! tuning, closed-form analysis reports, and band optimization.
//!
//! Exit codes: 0 success, 2 validation/configuration error, 3 runtime
//! (I/O) failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use dpopt_core::analysis::{self, RegimeMode, RegimeQuery};
use dpopt_core::error::Error as CoreError;
use dpopt_core::harness::{self, output, presets, ExperimentSpec, TuningGrid, TuningTarget, Variant};
use dpopt_core::noise::{self, NoiseCorrelation};
use dpopt_core::vector::Vector;

#[derive(Parser)]
#[command(name = "dpopt", about = "Private adaptive-optimizer laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment (tunes first when the spec carries a grid).
    Run(RunArgs),
    /// Grid-tune hyperparameters, then re-run the winner on fresh seeds.
    Tune(RunArgs),
    /// Closed-form reports as JSON on stdout.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Optimize banded-Toeplitz noise-correlation coefficients.
    OptimizeBands(OptimizeBandsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: logreg-1d, quadratic-2d, constant-gradient.
    #[arg(long)]
    preset: Option<String>,
    /// Optimizer variant override.
    #[arg(long)]
    variant: Option<String>,
    /// Noise multiplier override.
    #[arg(long)]
    sigma: Option<f64>,
    /// Clip norm override.
    #[arg(long)]
    clip: Option<f64>,
    /// Trial count override.
    #[arg(long)]
    trials: Option<u64>,
    /// Round count override.
    #[arg(long)]
    rounds: Option<u64>,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Learning rate override.
    #[arg(long)]
    eta: Option<f64>,
    /// Drop the sqrt(2) composition factor on the independent-moment
    /// noises ("for free").
    #[arg(long)]
    ime_for_free: bool,
    /// Correlation override: "identity", a band-coefficient JSON file, or
    /// a lower-triangular CSV matrix.
    #[arg(long)]
    correlation: Option<String>,
    /// Output directory for results.csv / summary.json / plot data.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Skip tuning even if the spec carries a grid.
    #[arg(long)]
    no_tune: bool,
    /// Also write per-round plot-data CSVs.
    #[arg(long)]
    plot_data: bool,
    /// Dump the generated datasets (fixed-dataset problems only).
    #[arg(long)]
    dump_data: bool,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Second-moment bias of the privatized estimate.
    Bias(BiasArgs),
    /// Negative-coordinate regime threshold.
    Regime(RegimeArgs),
    /// Prefix-sum RMSE of a noise correlation.
    Rmse(RmseArgs),
    /// Squared-gradient sensitivity bound (optionally brute-forced).
    Sensitivity(SensitivityArgs),
    /// Scale-then-privatize steady state.
    SteadyState(SteadyStateArgs),
}

#[derive(Args)]
struct BiasArgs {
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Report the raw (unnormalized) bias at this round too.
    #[arg(long)]
    round: Option<u64>,
    /// Correlation file for the correlated-noise bias trajectory.
    #[arg(long)]
    correlation: Option<String>,
    /// Rounds of the correlated trajectory to report.
    #[arg(long, default_value_t = 16)]
    rounds: u64,
}

#[derive(Args)]
struct RegimeArgs {
    #[arg(long)]
    batch_size: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    dim: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// optimistic | pessimistic | mf-optimistic
    #[arg(long, default_value = "optimistic")]
    mode: String,
}

#[derive(Args)]
struct RmseArgs {
    /// "identity", a band JSON file, or a CSV matrix.
    #[arg(long, default_value = "identity")]
    correlation: String,
    #[arg(long)]
    rounds: u64,
    /// Per-round noise magnitude zeta sigma / B.
    #[arg(long, default_value_t = 1.0)]
    unit: f64,
}

#[derive(Args)]
struct SensitivityArgs {
    #[arg(long)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Also run the random-search oracle.
    #[arg(long)]
    brute_force: bool,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 1_000_000)]
    budget: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct SteadyStateArgs {
    /// Squared noiseless gradient, one value per coordinate.
    #[arg(long, value_delimiter = ',', required = true)]
    g_sq: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
}

#[derive(Args)]
struct OptimizeBandsArgs {
    #[arg(long)]
    rounds: u64,
    #[arg(long)]
    bands: usize,
    /// Report the strategy matrix's max column norm for sigma rescaling.
    #[arg(long)]
    normalize: bool,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

/// Config-file mirror of [`ExperimentSpec`] that also accepts a CSV path
/// as the correlation source.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    problem: harness::ProblemSpec,
    variant: Variant,
    privacy: dpopt_core::vector::PrivacyParams,
    #[serde(default)]
    hyper: dpopt_core::optim::HyperParams,
    correlation: CorrelationSource,
    #[serde(default)]
    rescale_sigma_by_sensitivity: bool,
    rounds: u64,
    trials: u64,
    base_seed: u64,
    #[serde(default)]
    tuning: Option<TuningGrid>,
    #[serde(default)]
    record_nu_trace: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CorrelationSource {
    Inline(NoiseCorrelation),
    Csv { csv: PathBuf },
}

impl ConfigFile {
    fn into_spec(self) -> Result<ExperimentSpec, CoreError> {
        let correlation = match self.correlation {
            CorrelationSource::Inline(c) => c,
            CorrelationSource::Csv { csv } => NoiseCorrelation::explicit_from_csv(&csv)?,
        };
        Ok(ExperimentSpec {
            problem: self.problem,
            variant: self.variant,
            privacy: self.privacy,
            hyper: self.hyper,
            correlation,
            rescale_sigma_by_sensitivity: self.rescale_sigma_by_sensitivity,
            rounds: self.rounds,
            trials: self.trials,
            base_seed: self.base_seed,
            tuning: self.tuning,
            record_nu_trace: self.record_nu_trace,
        })
    }
}

fn load_correlation(source: &str, rounds: u64) -> Result<NoiseCorrelation, CoreError> {
    if source == "identity" {
        return Ok(NoiseCorrelation::identity(rounds.max(1)));
    }
    let path = Path::new(source);
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text = std::fs::read_to_string(path)?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            // accept either a bare correlation or an optimize-bands report
            let inner = value.get("correlation").cloned().unwrap_or(value);
            Ok(serde_json::from_value(inner)?)
        }
        _ => NoiseCorrelation::explicit_from_csv(path),
    }
}

fn default_tuning_grid() -> TuningGrid {
    TuningGrid {
        etas: TuningGrid::log_spaced(1e-3, 10.0, 7),
        eps_s: vec![1e-8, 1e-6, 1e-4],
        target: TuningTarget::SelfVariant,
        tolerance: 0.0,
    }
}

fn workers_from_env() -> usize {
    std::env::var("DPOPT_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn build_spec(args: &RunArgs) -> Result<ExperimentSpec, CoreError> {
    let mut spec = match (&args.config, &args.preset) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)?;
            let config: ConfigFile = serde_json::from_str(&text)?;
            config.into_spec()?
        }
        (None, Some(name)) => presets::by_name(name)?,
        (None, None) => {
            return Err(CoreError::config("one of --config or --preset is required"))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if let Some(v) = &args.variant {
        spec.variant = Variant::parse(v)?;
    }
    if let Some(s) = args.sigma {
        spec.privacy.noise_mult = s;
    }
    if let Some(c) = args.clip {
        spec.privacy.clip_norm = c;
    }
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(r) = args.rounds {
        spec.rounds = r;
        if spec.correlation.is_identity() {
            spec.correlation = NoiseCorrelation::identity(r);
        }
    }
    if let Some(s) = args.seed {
        spec.base_seed = s;
    }
    if let Some(e) = args.eta {
        spec.hyper.eta = e;
    }
    if args.ime_for_free {
        spec.hyper.ime_scale_sigma = false;
    }
    if let Some(c) = &args.correlation {
        spec.correlation = load_correlation(c, spec.rounds)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_run(args: &RunArgs, force_tune: bool) -> Result<(), CoreError> {
    let mut spec = build_spec(args)?;
    if force_tune && spec.tuning.is_none() {
        spec.tuning = Some(default_tuning_grid());
    }
    let workers = workers_from_env();
    std::fs::create_dir_all(&args.out)?;

    let (result, tune_report) = if spec.tuning.is_some() && (force_tune || !args.no_tune) {
        let outcome = harness::tune(&spec, workers)?;
        if outcome.edge_of_grid {
            eprintln!(
                "warning: tuned learning rate {} sits on the grid boundary",
                outcome.winner_eta
            );
        }
        let report = serde_json::json!({
            "winner_eta": outcome.winner_eta,
            "winner_eps_s": outcome.winner_eps_s,
            "edge_of_grid": outcome.edge_of_grid,
            "grid": outcome.grid,
        });
        (outcome.result, Some(report))
    } else {
        (harness::run_trials(&spec, workers)?, None)
    };

    output::write_results_csv(&args.out.join("results.csv"), &result)?;
    output::write_summary_json(&args.out.join("summary.json"), &result)?;
    if let Some(report) = tune_report {
        std::fs::write(
            args.out.join("tuning.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    if args.plot_data {
        output::write_plot_data(&args.out.join("plot-data"), &result)?;
    }
    if args.dump_data {
        if let harness::ProblemSpec::LogReg {
            sparsity,
            n_train,
            n_test,
        } = result.spec.problem
        {
            let task = dpopt_core::problems::LogRegTask {
                sparsity,
                n_train,
                n_test,
            };
            let seed = result.spec.base_seed;
            dpopt_core::problems::dump_dataset_csv(
                &args.out.join("train.csv"),
                &task.train_set(dpopt_core::seed::lane(seed, &[dpopt_core::seed::tag::DATA_TRAIN])),
            )?;
            dpopt_core::problems::dump_dataset_csv(
                &args.out.join("test.csv"),
                &task.test_set(dpopt_core::seed::lane(seed, &[dpopt_core::seed::tag::DATA_TEST])),
            )?;
        } else {
            eprintln!("warning: --dump-data applies to fixed-dataset problems only");
        }
    }
    emit(&format!(
        "{} on {}: mean final loss {:.6} (sd {:.6}, {} trials, {} diverged); results in {}",
        result.spec.variant.name(),
        match &result.spec.problem {
            harness::ProblemSpec::Quadratic { .. } => "quadratic",
            harness::ProblemSpec::LogReg { .. } => "logreg",
            harness::ProblemSpec::ConstantGradient { .. } => "constant-gradient",
        },
        result.aggregate.mean_final_loss,
        result.aggregate.sd_final_loss,
        result.aggregate.trials,
        result.aggregate.diverged,
        args.out.display()
    ));
    Ok(())
}

fn cmd_analyze(cmd: &AnalyzeCmd) -> Result<(), CoreError> {
    let report = match cmd {
        AnalyzeCmd::Bias(a) => {
            let normalized = analysis::iid_nu_hat_bias(a.clip, a.sigma, a.batch_size);
            let mut out = serde_json::json!({
                "nu_hat_bias": normalized,
                "clip": a.clip,
                "sigma": a.sigma,
                "batch_size": a.batch_size,
            });
            if let Some(t) = a.round {
                out["nu_bias_raw"] =
                    analysis::iid_nu_bias_raw(t, a.beta2, a.clip, a.sigma, a.batch_size).into();
                out["round"] = t.into();
            }
            if let Some(source) = &a.correlation {
                let corr = load_correlation(source, a.rounds)?;
                let seq = analysis::mf_nu_bias_sequence(
                    &corr, a.beta2, a.rounds, a.clip, a.sigma, a.batch_size,
                )?;
                let rec = analysis::mf_nu_bias_recursive(
                    &corr, a.beta2, a.rounds, a.clip, a.sigma, a.batch_size,
                )?;
                out["mf_bias_trace"] = seq.into();
                out["mf_bias_recursive"] = rec.into();
            }
            out
        }
        AnalyzeCmd::Regime(a) => {
            let mode = match a.mode.as_str() {
                "optimistic" => RegimeMode::Optimistic,
                "pessimistic" => RegimeMode::Pessimistic,
                "mf-optimistic" => RegimeMode::MfOptimistic,
                other => {
                    return Err(CoreError::Validation(format!(
                        "unknown mode '{other}'; valid: optimistic, pessimistic, mf-optimistic"
                    )))
                }
            };
            let query = RegimeQuery {
                batch_size: a.batch_size,
                noise_mult: a.sigma,
                dim: a.dim,
                beta2: a.beta2,
                clip_norm: a.clip,
                mode,
            };
            let report = analysis::regime_threshold(&query)?;
            // reference anchor: the max dimension at batch 2048, sigma 1
            let reference = analysis::regime_threshold(&RegimeQuery {
                batch_size: 2048.0,
                noise_mult: 1.0,
                ..query
            })?;
            serde_json::json!({
                "query": query,
                "report": report,
                "reference_max_dim_at_b2048_sigma1": reference.implied_max_dim,
            })
        }
        AnalyzeCmd::Rmse(a) => {
            let corr = load_correlation(&a.correlation, a.rounds)?;
            let rmse = noise::prefix_sum_rmse(&corr, a.rounds, a.unit)?;
            serde_json::json!({
                "rmse": rmse,
                "rounds": a.rounds,
                "unit": a.unit,
                "max_col_norm_of_inverse": corr.max_col_norm_of_inverse(),
            })
        }
        AnalyzeCmd::Sensitivity(a) => {
            let bound = analysis::ime_sensitivity_bound(a.batch_size, a.clip);
            let mut out = serde_json::json!({
                "bound": bound,
                "batch_size": a.batch_size,
                "clip": a.clip,
            });
            if a.brute_force {
                out["brute_force"] = analysis::brute_force_ime_sensitivity(
                    a.batch_size,
                    a.clip,
                    a.dim,
                    a.budget,
                    a.seed,
                )
                .into();
            }
            out
        }
        AnalyzeCmd::SteadyState(a) => {
            let g_sq = Vector::new(a.g_sq.clone())?;
            let ss = analysis::stp_steady_state(&g_sq, a.clip, a.sigma, a.batch_size, a.beta2)?;
            serde_json::json!({
                "steady_state": ss.as_slice(),
                "contraction_factor": analysis::stp_contraction_factor(
                    a.clip, a.sigma, a.batch_size, a.beta2
                ),
            })
        }
    };
    emit(&serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_optimize_bands(args: &OptimizeBandsArgs) -> Result<(), CoreError> {
    let opt = noise::optimize_banded(args.rounds, args.bands, args.normalize)?;
    if !opt.converged {
        eprintln!(
            "warning: band search hit the iteration cap after {} iterations; best found reported",
            opt.iterations
        );
    }
    std::fs::write(&args.out, serde_json::to_string_pretty(&opt)?)?;
    let identity = noise::prefix_sum_rmse(
        &NoiseCorrelation::identity(args.rounds),
        args.rounds,
        1.0,
    )?;
    emit(&format!(
        "bands={} rounds={}: objective {:.6} (identity {:.6}, delta {:+.6}); wrote {}",
        args.bands,
        args.rounds,
        opt.objective,
        identity,
        opt.objective - identity,
        args.out.display()
    ));
    Ok(())
}


/// Prints to stdout, treating a closed pipe as a normal early exit.
fn emit(text: &str) {
    let mut out = std::io::stdout();
    if let Err(err) = writeln!(out, "{text}") {
        if err.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Io(_) | CoreError::Csv(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, false),
        Command::Tune(args) => cmd_run(args, true),
        Command::Analyze(cmd) => cmd_analyze(cmd),
        Command::OptimizeBands(args) => cmd_optimize_bands(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
