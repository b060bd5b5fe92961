//! Command-line interface: simulate datasets, assess observability,
//! calibrate lever arms, run evaluation sweeps, and benchmark run time.
//!
//! Exit codes: 0 = success (calibrate: certified global optimum),
//! 3 = verified global optimum, 4 = local solution only, 1 = data or
//! solver error, 2 = usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use levercal_core::qcqp::{assess_motion, Axis};
use levercal_core::sim::{
    simulate, NoiseLevel, NoiseMode, PathKind, SimConfig, Surface,
};
use levercal_core::solver::SignPolicy;
use levercal_core::{calibrate, CalibrateOptions, Certificate, MotionVerdict, PriorConstraint};

use levercal::eval::{bench_runtime, run_sweep, BenchSpec, Setting, SweepSpec};
use levercal::io::{
    parse_motion_file, parse_poses_file, write_motion_file, write_result_file, write_truth_file,
    Config, ResultFile,
};

#[derive(Parser)]
#[command(name = "levercal", version, about = "GNSS antenna lever-arm calibration from motion data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a motion dataset and write it with a ground-truth sidecar.
    Simulate {
        /// Key/value configuration file describing the dataset.
        #[arg(long)]
        config: PathBuf,
        /// Output motion file; the truth sidecar gets a .truth suffix.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed from the configuration file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the observability report for a motion file.
    Assess {
        /// Motion file to inspect.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Calibrate lever arms from a motion file and write a result file.
    Calibrate {
        /// Motion file with one record per motion step.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output result file.
        #[arg(long)]
        out: PathBuf,
        /// Prior knowledge, repeatable: arm-length=<antenna>:<meters> or
        /// z-mag=<antenna>:<meters>, antennas numbered from 1.
        #[arg(long = "prior")]
        priors: Vec<String>,
        /// Enables the cross-antenna regularization term.
        #[arg(long)]
        regularize: bool,
        /// Resolves sign ambiguity by assuming antennas sit above the IMU.
        #[arg(long)]
        above_imu: bool,
        /// Relative duality-gap tolerance for certification.
        #[arg(long)]
        tolerance_gap: Option<f64>,
        /// Absolute eigenvalue floor for null-space membership.
        #[arg(long)]
        tolerance_null: Option<f64>,
    },
    /// Run a Monte-Carlo error sweep and write a plot-ready CSV.
    Sweep {
        /// Key/value sweep specification file.
        #[arg(long)]
        spec: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the base seed from the specification.
        #[arg(long)]
        seed: Option<u64>,
        /// Caps the worker threads used for sweep trials.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Benchmark calibration run time and print a quartile table.
    Bench {
        /// Key/value benchmark specification file.
        #[arg(long)]
        spec: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Assess { input } => cmd_assess(&input),
        Command::Calibrate {
            input,
            out,
            priors,
            regularize,
            above_imu,
            tolerance_gap,
            tolerance_null,
        } => cmd_calibrate(
            &input,
            &out,
            &priors,
            regularize,
            above_imu,
            tolerance_gap,
            tolerance_null,
        ),
        Command::Sweep { spec, out, seed, threads } => cmd_sweep(&spec, &out, seed, threads),
        Command::Bench { spec } => cmd_bench(&spec),
    };
    match outcome {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn parse_surface(config: &Config) -> Result<Surface, String> {
    match config.get("surface").unwrap_or("hilly") {
        "hilly" => Ok(Surface::hilly_default()),
        "flat" => Ok(Surface::Flat),
        other => Err(format!("unknown surface {other:?} (expected hilly or flat)")),
    }
}

fn parse_noise_mode(config: &Config) -> Result<NoiseMode, String> {
    match config.get("noise_mode").unwrap_or("equal") {
        "equal" => Ok(NoiseMode::Equal),
        "imu-skewed" => Ok(NoiseMode::ImuSkewed),
        other => Err(format!("unknown noise_mode {other:?} (expected equal or imu-skewed)")),
    }
}

fn parse_settings(config: &Config) -> Result<Vec<Setting>, String> {
    config
        .require("settings")
        .map_err(|e| e.to_string())?
        .split_whitespace()
        .map(|token| token.parse::<Setting>())
        .collect()
}

fn cmd_simulate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<ExitCode, String> {
    let config = Config::from_path(config_path).map_err(|e| e.to_string())?;
    let arms = config.parse_vectors("arms").map_err(|e| e.to_string())?;
    let noise = config.parse_opt::<f64>("noise").map_err(|e| e.to_string())?.unwrap_or(0.0);
    let path = match config.get("poses") {
        Some(poses_path) => {
            let resolved = config_path.parent().map_or_else(
                || PathBuf::from(poses_path),
                |dir| dir.join(poses_path),
            );
            PathKind::ExternalTrajectory(parse_poses_file(&resolved).map_err(|e| e.to_string())?)
        }
        None => PathKind::SinusoidMixture,
    };
    let step_count = match &path {
        PathKind::ExternalTrajectory(poses) => poses.len().saturating_sub(1),
        PathKind::SinusoidMixture => config.parse_required::<usize>("steps").map_err(|e| e.to_string())?,
    };
    let sim_config = SimConfig {
        path,
        surface: parse_surface(&config)?,
        step_count,
        lever_arms: arms.clone(),
        noise_level: NoiseLevel::Relative(noise),
        noise_mode: parse_noise_mode(&config)?,
        seed: seed
            .or(config.parse_opt::<u64>("seed").map_err(|e| e.to_string())?)
            .unwrap_or(0),
    };
    let dataset = simulate(&sim_config).map_err(|e| e.to_string())?;
    write_motion_file(out, &dataset.steps).map_err(|e| e.to_string())?;
    let truth_path = sidecar_path(out, "truth");
    write_truth_file(&truth_path, &dataset.lever_arms).map_err(|e| e.to_string())?;
    println!(
        "wrote {} steps, {} antennas to {} (truth: {})",
        dataset.steps.len(),
        dataset.lever_arms.len(),
        out.display(),
        truth_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Appends `.suffix` to the full file name, keeping the original extension.
fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.push('.');
    name.push_str(suffix);
    out.with_file_name(name)
}

fn cmd_assess(input: &Path) -> Result<ExitCode, String> {
    let (steps, _) = parse_motion_file(input).map_err(|e| e.to_string())?;
    let report = assess_motion(&steps).map_err(|e| e.to_string())?;
    println!("steps = {}", steps.len());
    println!("rotating steps = {}", report.rotating_steps);
    println!("rotation rank = {}", report.rotation_rank);
    let ranks: Vec<String> = report.antenna_ranks.iter().map(|r| r.to_string()).collect();
    println!("antenna ranks = {}", ranks.join(" "));
    println!(
        "principal spread = {:.3} deg, {:.3} deg",
        report.principal_spread[0].to_degrees(),
        report.principal_spread[1].to_degrees()
    );
    println!(
        "max pairwise axis angle = {:.3} deg",
        report.max_pairwise_axis_angle.to_degrees()
    );
    println!("verdict = {}", report.verdict);
    if report.verdict == MotionVerdict::Degenerate {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

/// Parses one `--prior` flag: `arm-length=<antenna>:<value>` or
/// `z-mag=<antenna>:<value>` with 1-based antenna numbers.
fn parse_prior(raw: &str, antennas: usize) -> Result<PriorConstraint, String> {
    let (kind, rest) = raw
        .split_once('=')
        .ok_or_else(|| format!("prior {raw:?}: expected <kind>=<antenna>:<value>"))?;
    let (antenna, value) = rest
        .split_once(':')
        .ok_or_else(|| format!("prior {raw:?}: expected <antenna>:<value> after ="))?;
    let antenna: usize = antenna
        .parse()
        .map_err(|_| format!("prior {raw:?}: bad antenna number {antenna:?}"))?;
    if antenna == 0 || antenna > antennas {
        return Err(format!(
            "prior {raw:?}: antenna {antenna} out of range 1..={antennas}"
        ));
    }
    let value: f64 = value
        .parse()
        .map_err(|_| format!("prior {raw:?}: bad value {value:?}"))?;
    match kind {
        "arm-length" => Ok(PriorConstraint::ArmLength { antenna: antenna - 1, length: value }),
        "z-mag" => Ok(PriorConstraint::ComponentMagnitude {
            antenna: antenna - 1,
            axis: Axis::Z,
            magnitude: value,
        }),
        other => Err(format!("prior {raw:?}: unknown kind {other:?}")),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    input: &Path,
    out: &Path,
    raw_priors: &[String],
    regularize: bool,
    above_imu: bool,
    tolerance_gap: Option<f64>,
    tolerance_null: Option<f64>,
) -> Result<ExitCode, String> {
    let (steps, header) = parse_motion_file(input).map_err(|e| e.to_string())?;
    let priors: Vec<PriorConstraint> = raw_priors
        .iter()
        .map(|raw| parse_prior(raw, header.antennas))
        .collect::<Result<_, _>>()?;
    let report = assess_motion(&steps).map_err(|e| e.to_string())?;
    let mut options = CalibrateOptions {
        use_regularization: regularize,
        sign_policy: if above_imu { SignPolicy::AboveImu } else { SignPolicy::None },
        ..CalibrateOptions::default()
    };
    if let Some(gap) = tolerance_gap {
        options.gap_tolerance = gap;
    }
    if let Some(null) = tolerance_null {
        options.null_tolerance = null;
    }
    let result = calibrate(&steps, &priors, &options).map_err(|e| e.to_string())?;
    let file = ResultFile {
        lever_arms: result.lever_arms.clone(),
        mu: result.mu,
        primal_cost: result.primal_cost,
        dual_bound: result.dual_bound,
        duality_gap: result.duality_gap,
        certificate: result.certificate,
        null_space_dim: result.null_space_dim,
        verdict: report.verdict,
        tool: format!("levercal {}", env!("CARGO_PKG_VERSION")),
    };
    write_result_file(out, &file).map_err(|e| e.to_string())?;
    for (i, arm) in result.lever_arms.iter().enumerate() {
        println!("arm {} = {:.6} {:.6} {:.6} m", i + 1, arm.x, arm.y, arm.z);
    }
    println!("certificate = {:?}", result.certificate);
    println!("duality gap = {:.3e}", result.duality_gap);
    let code = match result.certificate {
        Certificate::CertifiedGlobal => 0,
        Certificate::VerifiedGlobal => 3,
        Certificate::LocalOnly => 4,
    };
    Ok(ExitCode::from(code))
}

fn cmd_sweep(
    spec_path: &Path,
    out: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<ExitCode, String> {
    if let Some(threads) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let config = Config::from_path(spec_path).map_err(|e| e.to_string())?;
    let spec = SweepSpec {
        noise_levels: config.parse_list("noise_levels").map_err(|e| e.to_string())?,
        sizes: config.parse_list("sizes").map_err(|e| e.to_string())?,
        runs: config.parse_required("runs").map_err(|e| e.to_string())?,
        antennas: config.parse_required("antennas").map_err(|e| e.to_string())?,
        settings: parse_settings(&config)?,
        surface: parse_surface(&config)?,
        noise_mode: parse_noise_mode(&config)?,
        seed: seed
            .or(config.parse_opt("seed").map_err(|e| e.to_string())?)
            .unwrap_or(0),
    };
    let result = run_sweep(&spec)?;
    std::fs::write(out, result.to_csv()).map_err(|e| e.to_string())?;
    let invalid = result.cells.iter().filter(|c| !c.valid).count();
    println!("wrote {} cells to {} ({} invalid)", result.cells.len(), out.display(), invalid);
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(spec_path: &Path) -> Result<ExitCode, String> {
    let config = Config::from_path(spec_path).map_err(|e| e.to_string())?;
    let spec = BenchSpec {
        sizes: config.parse_list("sizes").map_err(|e| e.to_string())?,
        antennas: config.parse_list("antennas").map_err(|e| e.to_string())?,
        settings: parse_settings(&config)?,
        repetitions: config.parse_required("repetitions").map_err(|e| e.to_string())?,
        noise: config.parse_opt::<f64>("noise").map_err(|e| e.to_string())?.unwrap_or(0.1),
        seed: config.parse_opt("seed").map_err(|e| e.to_string())?.unwrap_or(0),
    };
    let result = bench_runtime(&spec)?;
    println!(
        "{:>8} {:>8} {:>8} {:>12} {:>12} {:>12}",
        "antennas", "size", "setting", "q25 [ms]", "median [ms]", "q75 [ms]"
    );
    for row in &result.rows {
        println!(
            "{:>8} {:>8} {:>8} {:>12.3} {:>12.3} {:>12.3}",
            row.antennas,
            row.size,
            row.setting.to_string(),
            row.stats.q25 * 1e3,
            row.stats.q50 * 1e3,
            row.stats.q75 * 1e3
        );
    }
    Ok(ExitCode::SUCCESS)
}
