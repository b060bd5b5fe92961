//! Monte-Carlo evaluation: error sweeps over noise levels and dataset
//! sizes under the five calibration settings, plus wall-clock
//! benchmarking of the full calibration call.
//!
//! Setting taxonomy:
//! * I: unconstrained
//! * II: cross-antenna regularization
//! * III: arm-length priors
//! * IV: regularization and arm-length priors
//! * V: regularization, arm-length, and vertical-magnitude priors
//!
//! Sweeps are deterministic: every trial's seed is derived from the
//! sweep's base seed and the trial's cell coordinates, so reruns and
//! thread counts cannot change the numbers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use levercal_core::qcqp::Axis;
use levercal_core::sim::{
    add_noise, derive_seed, simulate, NoiseLevel, NoiseMode, PathKind, SimConfig, Surface,
};
use levercal_core::solver::SignPolicy;
use levercal_core::{calibrate, CalibrateOptions, PriorConstraint};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Salt for the per-trial truth/arm stream.
const ARMS_STREAM_SALT: u64 = 0x41524d53;
/// Salt for the per-trial trajectory stream.
const PATH_STREAM_SALT: u64 = 0x50415448;
/// Salt for the per-trial measurement-noise stream.
const NOISE_STREAM_SALT: u64 = 0x53574e53;

/// One of the five calibration settings compared in the evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Setting {
    I,
    II,
    III,
    IV,
    V,
}

impl Setting {
    /// All settings in presentation order.
    pub const ALL: [Setting; 5] = [Setting::I, Setting::II, Setting::III, Setting::IV, Setting::V];

    /// Whether the setting enables the cross-antenna regularization term.
    pub fn uses_regularization(self) -> bool {
        matches!(self, Setting::II | Setting::IV | Setting::V)
    }

    /// Whether the setting constrains the solution with priors.
    pub fn uses_priors(self) -> bool {
        matches!(self, Setting::III | Setting::IV | Setting::V)
    }

    /// Builds the setting's prior constraints from the true arms.
    pub fn priors(self, truth: &[Vector3<f64>]) -> Vec<PriorConstraint> {
        let mut priors = Vec::new();
        if self.uses_priors() {
            for (antenna, arm) in truth.iter().enumerate() {
                priors.push(PriorConstraint::ArmLength { antenna, length: arm.norm() });
                if self == Setting::V {
                    priors.push(PriorConstraint::ComponentMagnitude {
                        antenna,
                        axis: Axis::Z,
                        magnitude: arm.z.abs(),
                    });
                }
            }
        }
        priors
    }

    /// Solver options for this setting.
    pub fn options(self) -> CalibrateOptions {
        CalibrateOptions {
            use_regularization: self.uses_regularization(),
            sign_policy: if self.uses_priors() { SignPolicy::AboveImu } else { SignPolicy::None },
            ..CalibrateOptions::default()
        }
    }

    /// Stable index used in seed derivation.
    fn index(self) -> u64 {
        match self {
            Setting::I => 0,
            Setting::II => 1,
            Setting::III => 2,
            Setting::IV => 3,
            Setting::V => 4,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
            Setting::IV => "IV",
            Setting::V => "V",
        };
        f.write_str(name)
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "I" => Ok(Setting::I),
            "II" => Ok(Setting::II),
            "III" => Ok(Setting::III),
            "IV" => Ok(Setting::IV),
            "V" => Ok(Setting::V),
            other => Err(format!("unknown setting {other:?} (expected I..V)")),
        }
    }
}

/// Full description of an evaluation sweep.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    /// Relative noise levels (fractions, 0.1 = 10%).
    pub noise_levels: Vec<f64>,
    /// Dataset sizes (motion steps per trial).
    pub sizes: Vec<usize>,
    /// Independent trials per cell.
    pub runs: usize,
    /// Antennas per trial.
    pub antennas: usize,
    /// Settings to compare.
    pub settings: Vec<Setting>,
    /// Terrain the simulated vehicle drives on.
    pub surface: Surface,
    /// How noise is distributed between IMU and antennas.
    pub noise_mode: NoiseMode,
    /// Base seed; all per-trial seeds derive from it.
    pub seed: u64,
}

impl SweepSpec {
    /// Validates the structural invariants of the spec.
    pub fn validate(&self) -> Result<(), String> {
        if self.runs == 0 {
            return Err("runs must be at least 1".into());
        }
        if self.antennas == 0 {
            return Err("antenna count must be at least 1".into());
        }
        if let Some(size) = self.sizes.iter().find(|&&s| s < 2) {
            return Err(format!("dataset size {size} is below the minimum of 2"));
        }
        if let Some(level) = self.noise_levels.iter().find(|&&l| !(l >= 0.0)) {
            return Err(format!("noise level {level} is invalid"));
        }
        if self.sizes.is_empty() || self.noise_levels.is_empty() || self.settings.is_empty() {
            return Err("noise_levels, sizes, and settings must be non-empty".into());
        }
        Ok(())
    }
}

/// Aggregated error statistics for one (noise, size, setting) cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub noise: f64,
    pub size: usize,
    pub setting: Setting,
    /// 25th/50th/75th percentile of the per-trial mean translation error.
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    /// Mean over successful trials.
    pub mean: f64,
    /// Trials that returned an error instead of an estimate.
    pub failures: usize,
    /// Total trials attempted.
    pub runs: usize,
    /// False when more than 20% of trials failed; quantiles are NaN then.
    pub valid: bool,
}

/// All cells of a finished sweep, in deterministic order.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
}

impl SweepResult {
    /// Renders the plot-ready CSV summary.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("noise,size,setting,q25,q50,q75,mean,failures\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                cell.noise,
                cell.size,
                cell.setting,
                cell.q25,
                cell.q50,
                cell.q75,
                cell.mean,
                cell.failures
            ));
        }
        out
    }
}

/// Euclidean distance between an estimated and a true lever arm.
pub fn translation_error(estimate: &Vector3<f64>, truth: &Vector3<f64>) -> f64 {
    (estimate - truth).norm()
}

/// Linearly interpolated quantile of already-sorted samples.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Draws ground-truth lever arms: unit length, heading uniform, vertical
/// fraction uniform in [0.25, 0.75]. The error-to-arm-length ratio then
/// reads directly in meters, and the vertical share matches mast-mounted
/// antennas: an arm lying in the IMU's horizontal plane would make the
/// length-prior geometry on planar data ill-posed (the vertical component
/// becomes a grazing sphere intersection), which is a mounting nobody
/// calibrates on purpose.
pub fn draw_truth_arms(antennas: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..antennas)
        .map(|_| {
            let heading = rng.gen_range(0.0..core::f64::consts::TAU);
            let vertical = rng.gen_range(0.25f64..0.75);
            let radial = (1.0 - vertical * vertical).sqrt();
            Vector3::new(radial * heading.cos(), radial * heading.sin(), vertical)
        })
        .collect()
}

/// Runs one trial and returns the mean translation error over antennas,
/// or `None` when calibration fails.
fn run_trial(
    spec: &SweepSpec,
    setting: Setting,
    noise: f64,
    size: usize,
    trial_seed: u64,
) -> Option<f64> {
    let truth = draw_truth_arms(spec.antennas, derive_seed(trial_seed, &[ARMS_STREAM_SALT]));
    let config = SimConfig {
        path: PathKind::SinusoidMixture,
        surface: spec.surface,
        step_count: size,
        lever_arms: truth.clone(),
        noise_level: NoiseLevel::Relative(0.0),
        noise_mode: spec.noise_mode,
        seed: derive_seed(trial_seed, &[PATH_STREAM_SALT]),
    };
    let clean = simulate(&config).ok()?;
    let dataset = if noise > 0.0 {
        add_noise(
            &clean,
            NoiseLevel::Relative(noise),
            spec.noise_mode,
            derive_seed(trial_seed, &[NOISE_STREAM_SALT]),
        )
        .ok()?
    } else {
        clean
    };
    let priors = setting.priors(&truth);
    let result = calibrate(&dataset.steps, &priors, &setting.options()).ok()?;
    let total: f64 = result
        .lever_arms
        .iter()
        .zip(&truth)
        .map(|(estimate, arm)| translation_error(estimate, arm))
        .sum();
    Some(total / spec.antennas as f64)
}

/// Derives the seed of one trial from the sweep seed and cell coordinates.
fn trial_seed(spec: &SweepSpec, noise_idx: usize, size_idx: usize, setting: Setting, run: usize) -> u64 {
    derive_seed(
        spec.seed,
        &[noise_idx as u64, size_idx as u64, setting.index(), run as u64],
    )
}

/// Runs the full sweep. Trials execute in parallel; results are reduced
/// in (cell, run) order so the output is independent of scheduling.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult, String> {
    spec.validate()?;
    let mut cells = Vec::new();
    for (noise_idx, &noise) in spec.noise_levels.iter().enumerate() {
        for (size_idx, &size) in spec.sizes.iter().enumerate() {
            for &setting in &spec.settings {
                let errors: Vec<Option<f64>> = (0..spec.runs)
                    .into_par_iter()
                    .map(|run| {
                        run_trial(spec, setting, noise, size, trial_seed(spec, noise_idx, size_idx, setting, run))
                    })
                    .collect();
                cells.push(reduce_cell(noise, size, setting, &errors));
            }
        }
    }
    Ok(SweepResult { cells })
}

fn reduce_cell(noise: f64, size: usize, setting: Setting, errors: &[Option<f64>]) -> CellResult {
    let runs = errors.len();
    let mut samples: Vec<f64> = errors.iter().filter_map(|e| *e).collect();
    let failures = runs - samples.len();
    let valid = failures * 5 <= runs;
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (q25, q50, q75, mean) = if valid && !samples.is_empty() {
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        (
            quantile_sorted(&samples, 0.25),
            quantile_sorted(&samples, 0.50),
            quantile_sorted(&samples, 0.75),
            mean,
        )
    } else {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    };
    CellResult {
        noise,
        size,
        setting,
        q25,
        q50,
        q75,
        mean,
        failures,
        runs,
        valid: valid && !samples.is_empty(),
    }
}

/// Description of a run-time benchmark.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    /// Dataset sizes to time.
    pub sizes: Vec<usize>,
    /// Antenna counts to time.
    pub antennas: Vec<usize>,
    /// Settings to time.
    pub settings: Vec<Setting>,
    /// Timed repetitions per row (10 or more).
    pub repetitions: usize,
    /// Relative noise level applied to the timed dataset.
    pub noise: f64,
    /// Base seed for dataset generation.
    pub seed: u64,
}

/// Wall-clock quartiles of one benchmark row, in seconds.
#[derive(Clone, Copy, Debug)]
pub struct RuntimeStats {
    pub min: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub max: f64,
}

/// One (antennas, size, setting) benchmark measurement.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub antennas: usize,
    pub size: usize,
    pub setting: Setting,
    pub stats: RuntimeStats,
}

/// All benchmark rows, in deterministic order.
#[derive(Clone, Debug)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

/// Times full calibration calls (construction, dual solve, recovery).
///
/// Runs strictly sequentially so measurements do not contend with each
/// other. The dataset for each (antennas, size) cell is generated once,
/// outside the timer, and shared by every setting; each setting gets one
/// untimed warmup call, then the timed repetitions interleave the settings
/// so slow machine drift lands on all of them equally instead of biasing
/// whichever was measured last.
pub fn bench_runtime(spec: &BenchSpec) -> Result<BenchResult, String> {
    if spec.repetitions < 10 {
        return Err("repetitions must be at least 10".into());
    }
    if spec.sizes.iter().any(|&s| s < 2) {
        return Err("dataset sizes must be at least 2".into());
    }
    let mut rows = Vec::new();
    for &antennas in &spec.antennas {
        for &size in &spec.sizes {
            let trial = derive_seed(spec.seed, &[antennas as u64, size as u64]);
            let truth = draw_truth_arms(antennas, derive_seed(trial, &[ARMS_STREAM_SALT]));
            let config = SimConfig {
                path: PathKind::SinusoidMixture,
                surface: Surface::hilly_default(),
                step_count: size,
                lever_arms: truth.clone(),
                noise_level: NoiseLevel::Relative(0.0),
                noise_mode: NoiseMode::Equal,
                seed: derive_seed(trial, &[PATH_STREAM_SALT]),
            };
            let clean = simulate(&config).map_err(|e| e.to_string())?;
            let dataset = if spec.noise > 0.0 {
                add_noise(
                    &clean,
                    NoiseLevel::Relative(spec.noise),
                    NoiseMode::Equal,
                    derive_seed(trial, &[NOISE_STREAM_SALT]),
                )
                .map_err(|e| e.to_string())?
            } else {
                clean
            };
            let prepared: Vec<(Setting, Vec<PriorConstraint>, CalibrateOptions)> = spec
                .settings
                .iter()
                .map(|&setting| (setting, setting.priors(&truth), setting.options()))
                .collect();
            for (_, priors, options) in &prepared {
                calibrate(&dataset.steps, priors, options).map_err(|e| e.to_string())?;
            }
            let mut times = vec![Vec::with_capacity(spec.repetitions); prepared.len()];
            for _ in 0..spec.repetitions {
                for (column, (_, priors, options)) in prepared.iter().enumerate() {
                    let start = Instant::now();
                    let result = calibrate(&dataset.steps, priors, options);
                    let elapsed = start.elapsed().as_secs_f64();
                    result.map_err(|e| e.to_string())?;
                    times[column].push(elapsed);
                }
            }
            for ((setting, _, _), mut series) in prepared.into_iter().zip(times) {
                series.sort_by(|a, b| a.partial_cmp(b).unwrap());
                rows.push(BenchRow {
                    antennas,
                    size,
                    setting,
                    stats: RuntimeStats {
                        min: series[0],
                        q25: quantile_sorted(&series, 0.25),
                        q50: quantile_sorted(&series, 0.50),
                        q75: quantile_sorted(&series, 0.75),
                        max: series[series.len() - 1],
                    },
                });
            }
        }
    }
    Ok(BenchResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SweepSpec {
        SweepSpec {
            noise_levels: vec![0.0, 0.1],
            sizes: vec![100],
            runs: 8,
            antennas: 1,
            settings: vec![Setting::I, Setting::III],
            surface: Surface::hilly_default(),
            noise_mode: NoiseMode::Equal,
            seed: 7,
        }
    }

    #[test]
    fn setting_parsing_and_flags() {
        for setting in Setting::ALL {
            assert_eq!(setting.to_string().parse::<Setting>().unwrap(), setting);
        }
        assert!(!Setting::I.uses_regularization() && !Setting::I.uses_priors());
        assert!(Setting::II.uses_regularization() && !Setting::II.uses_priors());
        assert!(!Setting::III.uses_regularization() && Setting::III.uses_priors());
        assert!(Setting::IV.uses_regularization() && Setting::IV.uses_priors());
        assert!(Setting::V.uses_regularization() && Setting::V.uses_priors());
        assert!("VI".parse::<Setting>().is_err());
    }

    #[test]
    fn setting_priors_match_the_taxonomy() {
        let truth = vec![Vector3::new(0.6, 0.0, 0.8), Vector3::new(0.0, 1.0, 0.0)];
        assert!(Setting::II.priors(&truth).is_empty());
        let iv = Setting::IV.priors(&truth);
        assert_eq!(iv.len(), 2);
        assert!(iv.iter().all(|p| matches!(p, PriorConstraint::ArmLength { .. })));
        let v = Setting::V.priors(&truth);
        assert_eq!(v.len(), 4);
        assert_eq!(
            v.iter().filter(|p| matches!(p, PriorConstraint::ComponentMagnitude { .. })).count(),
            2
        );
    }

    #[test]
    fn translation_error_examples() {
        assert_eq!(translation_error(&Vector3::new(1.0, 0.0, 0.0), &Vector3::zeros()), 1.0);
        let x = Vector3::new(0.4, -0.2, 0.9);
        assert_eq!(translation_error(&x, &x), 0.0);
        assert!((translation_error(&Vector3::new(0.1, 0.2, 0.2), &Vector3::zeros()) - 0.3).abs() <= 1e-15);
    }

    #[test]
    fn truth_arms_are_unit_mast_mounted_and_deterministic() {
        let arms = draw_truth_arms(64, 3);
        for arm in &arms {
            assert!((arm.norm() - 1.0).abs() <= 1e-12);
            assert!(arm.z >= 0.25 && arm.z <= 0.75);
        }
        assert_eq!(draw_truth_arms(64, 3), arms);
        assert_ne!(draw_truth_arms(64, 4), arms);
    }

    #[test]
    fn quantiles_interpolate_and_stay_ordered() {
        let samples = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&samples, 0.0), 1.0);
        assert_eq!(quantile_sorted(&samples, 0.5), 2.5);
        assert_eq!(quantile_sorted(&samples, 1.0), 4.0);
        assert_eq!(quantile_sorted(&samples, 0.25), 1.75);
    }

    #[test]
    fn sweep_is_deterministic_and_noiseless_cells_are_exact() {
        let spec = tiny_spec();
        let first = run_sweep(&spec).unwrap();
        let second = run_sweep(&spec).unwrap();
        assert_eq!(first.to_csv(), second.to_csv());
        assert_eq!(first.cells.len(), 4);
        for cell in first.cells.iter().filter(|c| c.noise == 0.0) {
            assert!(cell.valid);
            assert_eq!(cell.failures, 0);
            assert!(cell.q50 <= 1e-6, "noiseless median {}", cell.q50);
        }
        for cell in &first.cells {
            assert!(cell.q25 <= cell.q50 && cell.q50 <= cell.q75 || !cell.valid);
        }
    }

    #[test]
    fn sweep_rejects_invalid_specs() {
        let mut spec = tiny_spec();
        spec.runs = 0;
        assert!(run_sweep(&spec).is_err());
        let mut spec = tiny_spec();
        spec.sizes = vec![1];
        assert!(run_sweep(&spec).is_err());
        let mut spec = tiny_spec();
        spec.settings.clear();
        assert!(run_sweep(&spec).is_err());
    }

    #[test]
    fn csv_layout_is_plot_ready() {
        let spec = tiny_spec();
        let result = run_sweep(&spec).unwrap();
        let csv = result.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "noise,size,setting,q25,q50,q75,mean,failures");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,100,I,"));
        assert_eq!(first.split(',').count(), 8);
    }

    #[test]
    fn bench_produces_ordered_finite_quartiles() {
        let spec = BenchSpec {
            sizes: vec![100],
            antennas: vec![1],
            settings: vec![Setting::I],
            repetitions: 10,
            noise: 0.1,
            seed: 5,
        };
        let result = bench_runtime(&spec).unwrap();
        assert_eq!(result.rows.len(), 1);
        let stats = result.rows[0].stats;
        assert!(stats.min > 0.0 && stats.min.is_finite());
        assert!(stats.min <= stats.q25 && stats.q25 <= stats.q50);
        assert!(stats.q50 <= stats.q75 && stats.q75 <= stats.max);
    }

    #[test]
    fn dual_degenerate_trial_refines_instead_of_failing() {
        // This trial (flat-surface sweep seed 0, setting IV, run 3) reaches
        // a dual optimum whose two-dimensional null space contains no
        // constraint-feasible point: noisy planar data leaves the relaxation
        // a small genuine gap. Recovery must fall back to refinement and
        // report an honest certificate instead of erroring out of the sweep.
        let seed = derive_seed(0, &[0, 0, Setting::IV.index(), 3]);
        let truth = draw_truth_arms(3, derive_seed(seed, &[ARMS_STREAM_SALT]));
        let config = SimConfig {
            path: PathKind::SinusoidMixture,
            surface: Surface::Flat,
            step_count: 10_000,
            lever_arms: truth.clone(),
            noise_level: NoiseLevel::Relative(0.0),
            noise_mode: NoiseMode::Equal,
            seed: derive_seed(seed, &[PATH_STREAM_SALT]),
        };
        let clean = simulate(&config).unwrap();
        let dataset = add_noise(
            &clean,
            NoiseLevel::Relative(0.1),
            NoiseMode::Equal,
            derive_seed(seed, &[NOISE_STREAM_SALT]),
        )
        .unwrap();
        let priors = Setting::IV.priors(&truth);
        let result = calibrate(&dataset.steps, &priors, &Setting::IV.options()).unwrap();
        assert_eq!(result.null_space_dim, 2);
        assert!(result.refined);
        assert!(result.duality_gap > 0.0);
        for (estimate, arm) in result.lever_arms.iter().zip(&truth) {
            assert!((estimate.norm() - arm.norm()).abs() <= 1e-6);
            assert!(translation_error(estimate, arm) <= 0.5);
        }
    }

    #[test]
    fn bench_rejects_too_few_repetitions() {
        let spec = BenchSpec {
            sizes: vec![100],
            antennas: vec![1],
            settings: vec![Setting::I],
            repetitions: 9,
            noise: 0.0,
            seed: 5,
        };
        assert!(bench_runtime(&spec).is_err());
    }
}
