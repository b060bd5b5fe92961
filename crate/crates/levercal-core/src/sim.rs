//! Synthetic calibration datasets: 2D paths projected onto parametric
//! surfaces, poses derived from tangents and surface normals, rigid antenna
//! motion synthesized from ground-truth lever arms, and calibrated Gaussian
//! noise injection.
//!
//! Everything is deterministic given a seed; independent datasets may be
//! generated concurrently.

use alloc::vec::Vec;
use core::fmt;

use nalgebra::{ComplexField, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{relative_motion, Rotation, Transform};
use crate::qcqp::MotionStep;

/// Nominal along-track spacing of generated 2D path points, meters.
pub const PATH_STEP_SPACING: f64 = 1.0;
/// Salt mixed into the dataset seed to derive the noise stream seed, so the
/// path RNG and the noise RNG never overlap.
pub const NOISE_STREAM_SALT: u64 = 0x4e4f4953;

/// How the 2D path is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum PathKind {
    /// y(x) = sum of three seeded sinusoids; x advances by
    /// [`PATH_STEP_SPACING`] per point. Amplitudes are drawn from
    /// [0.8, 2.0] m, wavelengths from [22, 70] m, phases from [0, 2pi).
    /// Wavelengths are fixed in meters, so per-step motion statistics do
    /// not depend on the dataset size. The ranges keep heading changes
    /// gentle enough that surface tilt contributes a sizable share of the
    /// per-step rotation; yaw-dominated motion would let rotation noise
    /// (scaled by the mean step angle) wash out the weakly excited
    /// vertical components.
    SinusoidMixture,
    /// Poses supplied by the caller (for example read from a pose file);
    /// path generation and surface projection are skipped.
    ExternalTrajectory(Vec<Transform>),
}

/// The surface the 2D path is projected onto.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    /// h(x, y) = 0: planar motion, rotations about world z only.
    Flat,
    /// h(x, y) = amplitude * sin(frequency_x * x) * sin(frequency_y * y),
    /// giving rolling terrain and non-colinear rotation axes.
    Hilly { amplitude: f64, frequency_x: f64, frequency_y: f64 },
}

impl Surface {
    /// Desk-scale rolling terrain: 0.5 m bumps repeating every 20 m.
    pub fn hilly_default() -> Self {
        let omega = core::f64::consts::TAU / 20.0;
        Surface::Hilly { amplitude: 0.5, frequency_x: omega, frequency_y: omega }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            Surface::Flat => 0.0,
            Surface::Hilly { amplitude, frequency_x, frequency_y } => {
                amplitude * ComplexField::sin(frequency_x * x) * ComplexField::sin(frequency_y * y)
            }
        }
    }

    /// Unit surface normal (-dh/dx, -dh/dy, 1) / norm.
    pub fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        match *self {
            Surface::Flat => Vector3::z(),
            Surface::Hilly { amplitude, frequency_x, frequency_y } => {
                let hx = amplitude
                    * frequency_x
                    * ComplexField::cos(frequency_x * x)
                    * ComplexField::sin(frequency_y * y);
                let hy = amplitude
                    * frequency_y
                    * ComplexField::sin(frequency_x * x)
                    * ComplexField::cos(frequency_y * y);
                Vector3::new(-hx, -hy, 1.0).normalize()
            }
        }
    }
}

/// Noise magnitude: either a fraction of the dataset's own mean per-step
/// motion, or absolute standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseLevel {
    /// sigma_trans = level * mean per-step translation norm,
    /// sigma_rot = level * mean per-step rotation angle.
    Relative(f64),
    /// Fixed sigmas in meters and radians.
    Absolute { sigma_trans: f64, sigma_rot: f64 },
}

impl NoiseLevel {
    pub fn is_zero(&self) -> bool {
        match *self {
            NoiseLevel::Relative(l) => l == 0.0,
            NoiseLevel::Absolute { sigma_trans, sigma_rot } => sigma_trans == 0.0 && sigma_rot == 0.0,
        }
    }

    fn is_valid(&self) -> bool {
        match *self {
            NoiseLevel::Relative(l) => l >= 0.0,
            NoiseLevel::Absolute { sigma_trans, sigma_rot } => sigma_trans >= 0.0 && sigma_rot >= 0.0,
        }
    }
}

/// How the noise budget is split between the IMU and the GNSS antennas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// IMU poses and antenna positions share the same sigmas.
    Equal,
    /// IMU rotational sigma divided by six, IMU translational sigma
    /// multiplied by six; antenna positions keep the base sigma. Models a
    /// good gyro paired with poor IMU positioning.
    ImuSkewed,
}

/// Full description of one synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub path: PathKind,
    pub surface: Surface,
    /// Number of motion steps (pose count minus one), at least 2.
    pub step_count: usize,
    /// Ground-truth lever arms, meters in the IMU frame, one per antenna.
    pub lever_arms: Vec<Vector3<f64>>,
    pub noise_level: NoiseLevel,
    pub noise_mode: NoiseMode,
    pub seed: u64,
}

impl SimConfig {
    /// Rolling-terrain dataset with sinusoid-mixture path and no noise.
    pub fn hilly(step_count: usize, lever_arms: Vec<Vector3<f64>>, seed: u64) -> Self {
        SimConfig {
            path: PathKind::SinusoidMixture,
            surface: Surface::hilly_default(),
            step_count,
            lever_arms,
            noise_level: NoiseLevel::Relative(0.0),
            noise_mode: NoiseMode::Equal,
            seed,
        }
    }

    /// Planar dataset with sinusoid-mixture path and no noise.
    pub fn flat(step_count: usize, lever_arms: Vec<Vector3<f64>>, seed: u64) -> Self {
        SimConfig { surface: Surface::Flat, ..SimConfig::hilly(step_count, lever_arms, seed) }
    }
}

/// Provenance of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub seed: u64,
    pub noise_level: NoiseLevel,
    pub noise_mode: NoiseMode,
    /// Seed of the noise stream, when noise was applied.
    pub noise_seed: Option<u64>,
    /// None for externally supplied trajectories.
    pub surface: Option<Surface>,
}

/// A simulated dataset: world poses, derived motion steps, and the ground
/// truth the steps were synthesized from.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    /// IMU world poses, one more than steps.
    pub poses: Vec<Transform>,
    /// Derived relative motions with antenna measurements.
    pub steps: Vec<MotionStep>,
    /// Ground-truth lever arms, meters in the IMU frame.
    pub lever_arms: Vec<Vector3<f64>>,
    pub meta: DatasetMeta,
}

/// Errors from dataset generation.
#[derive(Clone, Debug, PartialEq)]
pub enum SimError {
    TooFewSteps { steps: usize },
    NoLeverArms,
    NegativeNoise,
    DegenerateTangent { index: usize },
    /// [`generate_path_2d`] cannot fabricate points for an external
    /// trajectory.
    ExternalPathNotSynthetic,
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SimError::TooFewSteps { steps } => {
                write!(f, "dataset needs at least 2 motion steps, got {steps}")
            }
            SimError::NoLeverArms => write!(f, "at least one ground-truth lever arm is required"),
            SimError::NegativeNoise => write!(f, "noise level must be non-negative"),
            SimError::DegenerateTangent { index } => {
                write!(f, "path tangent vanishes at point {index} (repeated points)")
            }
            SimError::ExternalPathNotSynthetic => {
                write!(f, "external trajectories carry their own poses; no 2D path to generate")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SimError {}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically derives a child seed from a base seed and a salt
/// chain. The mixing function is fixed (splitmix64), so derived seeds are
/// stable across platforms and releases.
pub fn derive_seed(base: u64, salts: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &salt in salts {
        s = splitmix64(s ^ splitmix64(salt));
    }
    s
}

/// Generates a smooth 2D path. For [`PathKind::SinusoidMixture`], three
/// harmonics are drawn from the seeded RNG (per harmonic: amplitude,
/// wavelength, phase) and x advances by [`PATH_STEP_SPACING`] per point.
pub fn generate_path_2d(kind: &PathKind, count: usize, seed: u64) -> Result<Vec<Vector2<f64>>, SimError> {
    match kind {
        PathKind::ExternalTrajectory(_) => Err(SimError::ExternalPathNotSynthetic),
        PathKind::SinusoidMixture => {
            if count < 2 {
                return Err(SimError::TooFewSteps { steps: count.saturating_sub(1) });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut harmonics = [(0.0f64, 0.0f64, 0.0f64); 3];
            for h in &mut harmonics {
                let amplitude = rng.gen_range(0.8..2.0);
                let wavelength = rng.gen_range(22.0..70.0);
                let phase = rng.gen_range(0.0..core::f64::consts::TAU);
                *h = (amplitude, wavelength, phase);
            }
            let points = (0..count)
                .map(|k| {
                    let x = k as f64 * PATH_STEP_SPACING;
                    let y: f64 = harmonics
                        .iter()
                        .map(|&(a, l, p)| a * ComplexField::sin(core::f64::consts::TAU * x / l + p))
                        .sum();
                    Vector2::new(x, y)
                })
                .collect();
            Ok(points)
        }
    }
}

/// Lifts a 2D path onto a surface and derives a full pose per point: the
/// forward axis follows the path tangent (central differences, one-sided at
/// the ends), the up axis is the surface normal orthogonalized against
/// forward, and left completes the right-handed frame.
pub fn project_to_surface(path: &[Vector2<f64>], surface: &Surface) -> Result<Vec<Transform>, SimError> {
    if path.len() < 2 {
        return Err(SimError::TooFewSteps { steps: path.len().saturating_sub(1) });
    }
    let positions: Vec<Vector3<f64>> = path
        .iter()
        .map(|p| Vector3::new(p.x, p.y, surface.height(p.x, p.y)))
        .collect();
    let mut poses = Vec::with_capacity(positions.len());
    for k in 0..positions.len() {
        let tangent = if k == 0 {
            positions[1] - positions[0]
        } else if k == positions.len() - 1 {
            positions[k] - positions[k - 1]
        } else {
            positions[k + 1] - positions[k - 1]
        };
        let norm = tangent.norm();
        if norm <= 1e-12 {
            return Err(SimError::DegenerateTangent { index: k });
        }
        let forward = tangent / norm;
        let normal = surface.normal(path[k].x, path[k].y);
        let up_raw = normal - forward * normal.dot(&forward);
        let up_norm = up_raw.norm();
        if up_norm <= 1e-12 {
            return Err(SimError::DegenerateTangent { index: k });
        }
        let up = up_raw / up_norm;
        let left = up.cross(&forward);
        let rotation = Rotation::from_matrix(&nalgebra::Matrix3::from_columns(&[forward, left, up]));
        poses.push(Transform::new(rotation, positions[k]));
    }
    Ok(poses)
}

/// Derives the relative IMU motions between consecutive poses and the
/// antenna translation each rigid lever arm would measure: for motion
/// A = (R, t), antenna i reports b_i = R x_i + t - x_i, which closes the
/// calibration cycle exactly on noiseless data.
pub fn synthesize_antenna_motion(
    poses: &[Transform],
    lever_arms: &[Vector3<f64>],
) -> Result<Vec<MotionStep>, SimError> {
    if poses.len() < 2 {
        return Err(SimError::TooFewSteps { steps: 0 });
    }
    if lever_arms.is_empty() {
        return Err(SimError::NoLeverArms);
    }
    let steps = poses
        .windows(2)
        .map(|w| {
            let a = relative_motion(&w[0], &w[1]);
            let motions = lever_arms
                .iter()
                .map(|x| a.rotation.rotate(x) + a.translation - x)
                .collect();
            MotionStep::new(a, motions)
        })
        .collect();
    Ok(steps)
}

/// The (sigma_trans, sigma_rot) pair a noise level denotes for a given
/// dataset; relative levels scale the dataset's own mean per-step
/// translation norm and rotation angle.
pub fn noise_sigmas(dataset: &MotionDataset, level: &NoiseLevel) -> (f64, f64) {
    match *level {
        NoiseLevel::Absolute { sigma_trans, sigma_rot } => (sigma_trans, sigma_rot),
        NoiseLevel::Relative(l) => {
            let count = dataset.steps.len().max(1) as f64;
            let mean_t: f64 =
                dataset.steps.iter().map(|s| s.imu_motion.translation.norm()).sum::<f64>() / count;
            let mean_r: f64 =
                dataset.steps.iter().map(|s| s.imu_motion.rotation.angle()).sum::<f64>() / count;
            (l * mean_t, l * mean_r)
        }
    }
}

fn sample_vector3(rng: &mut ChaCha8Rng, sigma_axis: f64) -> Vector3<f64> {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    let z: f64 = rng.sample(StandardNormal);
    Vector3::new(x, y, z) * sigma_axis
}

fn rotation_from_rotvec(v: &Vector3<f64>) -> Rotation {
    let angle = v.norm();
    if angle <= 1e-300 {
        Rotation::identity()
    } else {
        Rotation::from_axis_angle(v, angle)
    }
}

/// Perturbs a dataset with unbiased Gaussian noise and re-derives the
/// motions from the perturbed quantities.
///
/// IMU world poses receive translation noise (i.i.d. per axis, sigma_trans
/// divided by sqrt(3) so the expected perturbation magnitude matches the
/// configured sigma) and rotation noise (body-frame axis-angle vector,
/// sigma_rot divided by sqrt(3) per axis). Antenna world positions, rebuilt
/// from the ground truth, receive translation noise at the same per-axis
/// scale. Relative motions and antenna measurements are then re-derived
/// from the noisy quantities; consecutive steps therefore carry correlated
/// noise, which is a property of pose-level perturbation.
///
/// Noise stream layout (ChaCha8 from `seed`): each pose in order draws 3
/// translation then 3 rotation components; afterwards each pose in order
/// draws 3 components per antenna. A level of exactly zero returns the
/// dataset unchanged.
pub fn add_noise(
    dataset: &MotionDataset,
    level: NoiseLevel,
    mode: NoiseMode,
    seed: u64,
) -> Result<MotionDataset, SimError> {
    if !level.is_valid() {
        return Err(SimError::NegativeNoise);
    }
    if level.is_zero() {
        return Ok(dataset.clone());
    }
    let (sigma_trans, sigma_rot) = noise_sigmas(dataset, &level);
    let (imu_sigma_trans, imu_sigma_rot) = match mode {
        NoiseMode::Equal => (sigma_trans, sigma_rot),
        NoiseMode::ImuSkewed => (sigma_trans * 6.0, sigma_rot / 6.0),
    };
    let gnss_sigma = sigma_trans;
    let sqrt3 = ComplexField::sqrt(3.0f64);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy_poses: Vec<Transform> = dataset
        .poses
        .iter()
        .map(|pose| {
            let dt = sample_vector3(&mut rng, imu_sigma_trans / sqrt3);
            let dr = sample_vector3(&mut rng, imu_sigma_rot / sqrt3);
            Transform::new(
                pose.rotation.compose(&rotation_from_rotvec(&dr)),
                pose.translation + dt,
            )
        })
        .collect();
    let noisy_antenna_positions: Vec<Vec<Vector3<f64>>> = dataset
        .poses
        .iter()
        .map(|pose| {
            dataset
                .lever_arms
                .iter()
                .map(|x| {
                    let w = pose.rotation.rotate(x) + pose.translation;
                    w + sample_vector3(&mut rng, gnss_sigma / sqrt3)
                })
                .collect()
        })
        .collect();

    let steps: Vec<MotionStep> = noisy_poses
        .windows(2)
        .zip(noisy_antenna_positions.windows(2))
        .map(|(p, w)| {
            let a = relative_motion(&p[0], &p[1]);
            let rot_inv = p[0].rotation.inverse();
            let motions = w[0]
                .iter()
                .zip(w[1].iter())
                .map(|(w0, w1)| rot_inv.rotate(&(w1 - w0)))
                .collect();
            MotionStep::new(a, motions)
        })
        .collect();

    Ok(MotionDataset {
        poses: noisy_poses,
        steps,
        lever_arms: dataset.lever_arms.clone(),
        meta: DatasetMeta {
            noise_level: level,
            noise_mode: mode,
            noise_seed: Some(seed),
            ..dataset.meta.clone()
        },
    })
}

/// Generates a complete dataset from a configuration: path, surface
/// projection (or external poses), antenna synthesis, then noise.
pub fn simulate(config: &SimConfig) -> Result<MotionDataset, SimError> {
    if config.lever_arms.is_empty() {
        return Err(SimError::NoLeverArms);
    }
    if !config.noise_level.is_valid() {
        return Err(SimError::NegativeNoise);
    }
    let (poses, surface) = match &config.path {
        PathKind::SinusoidMixture => {
            if config.step_count < 2 {
                return Err(SimError::TooFewSteps { steps: config.step_count });
            }
            let path = generate_path_2d(&config.path, config.step_count + 1, config.seed)?;
            (project_to_surface(&path, &config.surface)?, Some(config.surface))
        }
        PathKind::ExternalTrajectory(poses) => {
            if poses.len() < 3 {
                return Err(SimError::TooFewSteps { steps: poses.len().saturating_sub(1) });
            }
            (poses.clone(), None)
        }
    };
    let steps = synthesize_antenna_motion(&poses, &config.lever_arms)?;
    let clean = MotionDataset {
        poses,
        steps,
        lever_arms: config.lever_arms.clone(),
        meta: DatasetMeta {
            seed: config.seed,
            noise_level: NoiseLevel::Relative(0.0),
            noise_mode: config.noise_mode,
            noise_seed: None,
            surface,
        },
    };
    if config.noise_level.is_zero() {
        return Ok(clean);
    }
    add_noise(
        &clean,
        config.noise_level,
        config.noise_mode,
        derive_seed(config.seed, &[NOISE_STREAM_SALT]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcqp::{accumulate, assess_motion, MotionVerdict};
    use approx::assert_relative_eq;
    use core::f64::consts::PI;
    use nalgebra::DVector;

    fn arm() -> Vector3<f64> {
        Vector3::new(0.4, -0.2, 0.7)
    }

    #[test]
    fn path_is_deterministic_and_finite() {
        let a = generate_path_2d(&PathKind::SinusoidMixture, 50, 7).unwrap();
        let b = generate_path_2d(&PathKind::SinusoidMixture, 50, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_path_2d(&PathKind::SinusoidMixture, 50, 8).unwrap();
        assert_ne!(a, c);

        let two = generate_path_2d(&PathKind::SinusoidMixture, 2, 1).unwrap();
        assert_eq!(two.len(), 2);
        assert!((two[1] - two[0]).norm() > 0.0);
        assert!(two.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    }

    #[test]
    fn path_step_lengths_vary() {
        let path = generate_path_2d(&PathKind::SinusoidMixture, 1001, 42).unwrap();
        let lengths: Vec<f64> = path.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        let var = lengths.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / lengths.len() as f64;
        assert!(var > 1e-6, "step-length variance {var} too small");
    }

    #[test]
    fn flat_straight_path_gives_pure_translations() {
        let path: Vec<Vector2<f64>> = (0..10).map(|k| Vector2::new(k as f64, 0.0)).collect();
        let poses = project_to_surface(&path, &Surface::Flat).unwrap();
        for w in poses.windows(2) {
            assert_eq!(w[0].rotation, w[1].rotation);
            let a = relative_motion(&w[0], &w[1]);
            assert_relative_eq!(a.rotation.angle(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn flat_curved_path_rotates_about_world_z_only() {
        let path: Vec<Vector2<f64>> = (0..40)
            .map(|k| {
                let x = k as f64;
                Vector2::new(x, 3.0 * ComplexField::sin(0.4 * x))
            })
            .collect();
        let poses = project_to_surface(&path, &Surface::Flat).unwrap();
        for w in poses.windows(2) {
            let a = relative_motion(&w[0], &w[1]);
            if a.rotation.angle() > 1e-6 {
                let (axis, _) = a.rotation.axis_angle();
                assert_relative_eq!(axis.x.abs(), 0.0, epsilon = 1e-9);
                assert_relative_eq!(axis.y.abs(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn repeated_points_are_rejected() {
        let path = vec![Vector2::new(0.0, 0.0), Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0)];
        assert!(matches!(
            project_to_surface(&path, &Surface::Flat),
            Err(SimError::DegenerateTangent { .. })
        ));
    }

    #[test]
    fn poses_sit_on_surface_with_orthonormal_frames() {
        let surface = Surface::hilly_default();
        let path = generate_path_2d(&PathKind::SinusoidMixture, 60, 3).unwrap();
        let poses = project_to_surface(&path, &surface).unwrap();
        for (pose, p) in poses.iter().zip(path.iter()) {
            assert_relative_eq!(pose.translation.z, surface.height(p.x, p.y), epsilon = 1e-12);
            let m = pose.rotation.to_matrix();
            assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-9);
            assert_relative_eq!((m.transpose() * m), nalgebra::Matrix3::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn synthesized_motion_matches_cycle_examples() {
        // Zero arm: the antenna repeats the IMU translation.
        let poses = vec![
            Transform::identity(),
            Transform::new(Rotation::from_axis_angle(&Vector3::z(), 0.3), Vector3::new(1.0, 0.2, 0.0)),
        ];
        let steps = synthesize_antenna_motion(&poses, &[Vector3::zeros()]).unwrap();
        assert_relative_eq!(steps[0].antenna_motions[0], steps[0].imu_motion.translation, epsilon = 1e-12);

        // Pure translation: any arm reports the IMU translation.
        let poses = vec![
            Transform::identity(),
            Transform::new(Rotation::identity(), Vector3::new(0.7, -0.1, 0.4)),
        ];
        let steps = synthesize_antenna_motion(&poses, &[arm()]).unwrap();
        assert_relative_eq!(steps[0].antenna_motions[0], Vector3::new(0.7, -0.1, 0.4), epsilon = 1e-12);

        // Half turn about z with arm (1,0,0): the antenna runs backwards 2 m.
        let poses = vec![
            Transform::identity(),
            Transform::new(Rotation::from_axis_angle(&Vector3::z(), PI), Vector3::zeros()),
        ];
        let steps = synthesize_antenna_motion(&poses, &[Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_relative_eq!(steps[0].antenna_motions[0], Vector3::new(-2.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn noiseless_dataset_closes_the_cycle() {
        let arms = vec![arm(), Vector3::new(-0.3, 0.5, 0.1)];
        let config = SimConfig::hilly(100, arms.clone(), 11);
        let data = simulate(&config).unwrap();
        assert_eq!(data.steps.len(), 100);
        assert_eq!(data.poses.len(), 101);
        let problem = accumulate(&data.steps, true).unwrap();
        let mut z = DVector::zeros(problem.n);
        for (i, x) in arms.iter().enumerate() {
            z[3 * i] = x[0];
            z[3 * i + 1] = x[1];
            z[3 * i + 2] = x[2];
        }
        z[problem.n - 1] = 1.0;
        let cost = problem.cost(&z);
        let bound = 1e-13 * problem.q_matrix.norm().max(1.0) * z.norm_squared();
        assert!(cost.abs() <= bound, "cost {cost} bound {bound}");
    }

    #[test]
    fn hilly_is_fully_observable_and_flat_is_planar() {
        let hilly = simulate(&SimConfig::hilly(200, vec![arm()], 5)).unwrap();
        assert_eq!(assess_motion(&hilly.steps).unwrap().verdict, MotionVerdict::FullyObservable);

        let flat = simulate(&SimConfig::flat(200, vec![arm()], 5)).unwrap();
        assert_eq!(assess_motion(&flat.steps).unwrap().verdict, MotionVerdict::PlanarOnly);
    }

    #[test]
    fn zero_noise_returns_dataset_unchanged() {
        let data = simulate(&SimConfig::hilly(50, vec![arm()], 9)).unwrap();
        let same = add_noise(&data, NoiseLevel::Relative(0.0), NoiseMode::Equal, 123).unwrap();
        assert_eq!(data, same);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let data = simulate(&SimConfig::hilly(50, vec![arm()], 9)).unwrap();
        let level = NoiseLevel::Relative(0.1);
        let a = add_noise(&data, level, NoiseMode::Equal, 77).unwrap();
        let b = add_noise(&data, level, NoiseMode::Equal, 77).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&data, level, NoiseMode::Equal, 78).unwrap();
        assert_ne!(a, c);
        assert_ne!(a, data);
    }

    #[test]
    fn relative_level_resolves_to_documented_sigmas() {
        // Build a trajectory whose every step translates 1 m and rotates
        // 0.5 rad, so a 10% level must give sigmas (0.1 m, 0.05 rad).
        let axes = [Vector3::z(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)];
        let mut poses = vec![Transform::identity()];
        for k in 0..8 {
            let a = Transform::new(
                Rotation::from_axis_angle(&axes[k % axes.len()], 0.5),
                Vector3::new(1.0, 0.0, 0.0),
            );
            let last = *poses.last().unwrap();
            poses.push(last.compose(&a));
        }
        let steps = synthesize_antenna_motion(&poses, &[arm()]).unwrap();
        let data = MotionDataset {
            poses,
            steps,
            lever_arms: vec![arm()],
            meta: DatasetMeta {
                seed: 0,
                noise_level: NoiseLevel::Relative(0.0),
                noise_mode: NoiseMode::Equal,
                noise_seed: None,
                surface: None,
            },
        };
        let (st, sr) = noise_sigmas(&data, &NoiseLevel::Relative(0.1));
        assert_relative_eq!(st, 0.1, epsilon = 1e-9);
        assert_relative_eq!(sr, 0.05, epsilon = 1e-9);
    }

    #[test]
    fn injected_noise_matches_configured_sigmas() {
        let data = simulate(&SimConfig::hilly(10_000, vec![arm()], 21)).unwrap();
        let level = NoiseLevel::Absolute { sigma_trans: 0.09, sigma_rot: 0.03 };
        let noisy = add_noise(&data, level, NoiseMode::Equal, 33).unwrap();

        let sqrt3 = 3.0f64.sqrt();
        // Pose translation perturbations: i.i.d. per axis, sigma/sqrt(3).
        let mut trans_samples = Vec::new();
        let mut rot_samples = Vec::new();
        for (clean, noisy) in data.poses.iter().zip(noisy.poses.iter()) {
            let dt = noisy.translation - clean.translation;
            trans_samples.extend_from_slice(dt.as_slice());
            let delta = clean.rotation.inverse().compose(&noisy.rotation);
            let (axis, angle) = delta.axis_angle();
            let rv = axis * angle;
            rot_samples.extend_from_slice(rv.as_slice());
        }
        let std = |samples: &[f64]| {
            let n = samples.len() as f64;
            (samples.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
        };
        assert_relative_eq!(std(&trans_samples), 0.09 / sqrt3, max_relative = 0.05);
        assert_relative_eq!(std(&rot_samples), 0.03 / sqrt3, max_relative = 0.05);

        // Rotating each measurement back to the world frame recovers the
        // noisy antenna position difference, whose deviation from the
        // clean one is the difference of two independent per-axis
        // N(0, sigma/sqrt(3)) draws: std sqrt(2) * sigma / sqrt(3).
        let mut antenna_samples = Vec::new();
        for k in 0..data.steps.len() {
            let clean_diff = data.poses[k].rotation.rotate(&data.steps[k].antenna_motions[0]);
            let noisy_diff = noisy.poses[k].rotation.rotate(&noisy.steps[k].antenna_motions[0]);
            let d = noisy_diff - clean_diff;
            antenna_samples.extend_from_slice(d.as_slice());
        }
        assert_relative_eq!(std(&antenna_samples), 2.0f64.sqrt() * 0.09 / sqrt3, max_relative = 0.05);
    }

    #[test]
    fn imu_skewed_mode_reshapes_the_budget() {
        let data = simulate(&SimConfig::hilly(4000, vec![arm()], 55)).unwrap();
        let level = NoiseLevel::Absolute { sigma_trans: 0.05, sigma_rot: 0.03 };
        let equal = add_noise(&data, level, NoiseMode::Equal, 66).unwrap();
        let skewed = add_noise(&data, level, NoiseMode::ImuSkewed, 66).unwrap();

        let pose_trans_std = |noisy: &MotionDataset| {
            let samples: Vec<f64> = data
                .poses
                .iter()
                .zip(noisy.poses.iter())
                .flat_map(|(c, n)| {
                    let d = n.translation - c.translation;
                    [d.x, d.y, d.z]
                })
                .collect();
            (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt()
        };
        let pose_rot_std = |noisy: &MotionDataset| {
            let samples: Vec<f64> = data
                .poses
                .iter()
                .zip(noisy.poses.iter())
                .flat_map(|(c, n)| {
                    let delta = c.rotation.inverse().compose(&n.rotation);
                    let (axis, angle) = delta.axis_angle();
                    let rv = axis * angle;
                    [rv.x, rv.y, rv.z]
                })
                .collect();
            (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt()
        };
        assert_relative_eq!(pose_trans_std(&skewed), 6.0 * pose_trans_std(&equal), max_relative = 0.1);
        assert_relative_eq!(pose_rot_std(&equal), 6.0 * pose_rot_std(&skewed), max_relative = 0.1);
    }

    #[test]
    fn external_trajectory_skips_generation() {
        let base = simulate(&SimConfig::hilly(30, vec![arm()], 2)).unwrap();
        let config = SimConfig {
            path: PathKind::ExternalTrajectory(base.poses.clone()),
            surface: Surface::Flat,
            step_count: 0,
            lever_arms: vec![arm()],
            noise_level: NoiseLevel::Relative(0.0),
            noise_mode: NoiseMode::Equal,
            seed: 99,
        };
        let data = simulate(&config).unwrap();
        assert_eq!(data.poses, base.poses);
        assert_eq!(data.meta.surface, None);
        assert!(matches!(
            generate_path_2d(&config.path, 10, 0),
            Err(SimError::ExternalPathNotSynthetic)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(matches!(
            simulate(&SimConfig::hilly(1, vec![arm()], 0)),
            Err(SimError::TooFewSteps { .. })
        ));
        assert!(matches!(simulate(&SimConfig::hilly(10, vec![], 0)), Err(SimError::NoLeverArms)));
        let mut config = SimConfig::hilly(10, vec![arm()], 0);
        config.noise_level = NoiseLevel::Relative(-0.1);
        assert!(matches!(simulate(&config), Err(SimError::NegativeNoise)));
    }
}
