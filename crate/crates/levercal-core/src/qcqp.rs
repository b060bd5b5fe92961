//! Assembles the calibration problem from motion measurements.
//!
//! Per step k the IMU reports the relative motion A_k = (R, t) it underwent,
//! and each antenna i reports the translation b_{i,k} it measured about
//! itself (in the antenna frame, axis-aligned with the IMU frame). A rigid
//! lever arm x_i must close the transformation cycle b + x = R x + t, so
//! every step contributes the linear residual (R - I) x_i + (t - b_{i,k}).
//!
//! Homogenizing with a scalar mu (mu^2 = 1) turns the stacked residuals into
//! a purely quadratic cost z^T Q z over z = [x_1^T .. x_o^T, mu]^T with
//! Q = sum_k M_k^T M_k. Cross-antenna regularization rows couple antenna
//! pairs through the same rigidity assumption, and prior knowledge (arm
//! length, single-component magnitude) enters as quadratic equality
//! constraints z^T P z = 0. This module builds Q, the constraint matrices,
//! and a motion-observability report; solving lives in [`crate::solver`].

use alloc::{vec, vec::Vec};
use core::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::geometry::{basis_outer, kron, Transform};

/// Singular values below this fraction of the largest count as zero when
/// computing numerical ranks.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// Steps must rotate by more than this angle (radians) to contribute a
/// usable rotation axis to the observability assessment.
pub const AXIS_ANGLE_GATE: f64 = 1e-3;
/// Two rotation axes count as non-colinear when some pair of axes is at
/// least this far apart (radians): 5 degrees.
pub const AXIS_SPREAD_THRESHOLD: f64 = 5.0 * core::f64::consts::PI / 180.0;
/// Cap on the number of axes entering the pairwise spread computation; a
/// larger dataset is stride-subsampled deterministically.
pub const MAX_SPREAD_SAMPLES: usize = 1024;

/// One synchronized calibration step: the IMU motion A_k plus the
/// translation each antenna measured over the same interval, meters.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionStep {
    pub imu_motion: Transform,
    pub antenna_motions: Vec<Vector3<f64>>,
}

impl MotionStep {
    pub fn new(imu_motion: Transform, antenna_motions: Vec<Vector3<f64>>) -> Self {
        MotionStep { imu_motion, antenna_motions }
    }

    pub fn antenna_count(&self) -> usize {
        self.antenna_motions.len()
    }
}

/// Coordinate axis selector for single-component priors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Prior knowledge about one lever arm, expressed as a quadratic equality.
///
/// Antenna indices are zero-based throughout the API.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorConstraint {
    /// The full arm length is known: ||x_i|| = length.
    ArmLength { antenna: usize, length: f64 },
    /// The magnitude of one component is known: |x_i[axis]| = magnitude.
    /// The sign stays unresolved here; the solver's sign policy or the
    /// reported candidate costs settle it.
    ComponentMagnitude { antenna: usize, axis: Axis, magnitude: f64 },
}

impl PriorConstraint {
    pub fn antenna(&self) -> usize {
        match *self {
            PriorConstraint::ArmLength { antenna, .. } => antenna,
            PriorConstraint::ComponentMagnitude { antenna, .. } => antenna,
        }
    }

    /// Whether this prior resolves the vertical ambiguity of planar motion
    /// (full arm length or z-component knowledge does; x/y components do not).
    pub fn covers_planar_deficit(&self) -> bool {
        match *self {
            PriorConstraint::ArmLength { .. } => true,
            PriorConstraint::ComponentMagnitude { axis, .. } => axis == Axis::Z,
        }
    }
}

/// Errors from problem construction.
#[derive(Clone, Debug, PartialEq)]
pub enum QcqpError {
    EmptyDataset,
    InconsistentAntennaCount { step: usize, expected: usize, found: usize },
    AntennaIndexOutOfRange { antenna: usize, count: usize },
    InvalidPair { pair: usize, pair_count: usize },
    NonPositiveArmLength { antenna: usize, length: f64 },
    NegativeMagnitude { antenna: usize, magnitude: f64 },
}

impl fmt::Display for QcqpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            QcqpError::EmptyDataset => write!(f, "dataset contains no motion steps"),
            QcqpError::InconsistentAntennaCount { step, expected, found } => write!(
                f,
                "step {step} reports {found} antenna motions, dataset declares {expected}"
            ),
            QcqpError::AntennaIndexOutOfRange { antenna, count } => {
                write!(f, "antenna index {antenna} out of range for {count} antennas")
            }
            QcqpError::InvalidPair { pair, pair_count } => {
                write!(f, "pair id {pair} out of range for {pair_count} antenna pairs")
            }
            QcqpError::NonPositiveArmLength { antenna, length } => {
                write!(f, "arm-length prior for antenna {antenna} must be positive, got {length}")
            }
            QcqpError::NegativeMagnitude { antenna, magnitude } => {
                write!(f, "component prior for antenna {antenna} must be non-negative, got {magnitude}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for QcqpError {}

/// The assembled QCQP: minimize z^T Q z subject to the homogenization
/// constraint 1 + z^T P_h z = 0 and one z^T P z = 0 per prior.
///
/// Layout: z = [x_1^T .. x_o^T, mu]^T with mu at index n - 1, n = 3o + 1.
#[derive(Clone, Debug)]
pub struct QcqpProblem {
    /// Antenna count o.
    pub o: usize,
    /// Variable dimension n = 3o + 1.
    pub n: usize,
    /// Accumulated cost matrix Q, symmetric PSD.
    pub q_matrix: DMatrix<f64>,
    /// Homogenization constraint matrix: zeros except (n-1, n-1) = -1.
    pub p_h: DMatrix<f64>,
    /// One constraint matrix per attached prior.
    pub p_q: Vec<DMatrix<f64>>,
    /// The priors the p_q matrices were built from, same order.
    pub priors: Vec<PriorConstraint>,
    /// Whether cross-antenna regularization rows were accumulated.
    pub use_regularization: bool,
}

impl QcqpProblem {
    /// Attaches prior-knowledge constraints, replacing any present ones.
    pub fn with_priors(mut self, priors: &[PriorConstraint]) -> Result<Self, QcqpError> {
        let (_, p_q) = build_constraints(priors, self.o)?;
        self.p_q = p_q;
        self.priors = priors.to_vec();
        Ok(self)
    }

    /// Cost J(z) = z^T Q z.
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        quad_form(&self.q_matrix, z)
    }

    /// Homogenization residual g_h(z) = 1 + z^T P_h z = 1 - mu^2.
    pub fn homogenization_value(&self, z: &DVector<f64>) -> f64 {
        1.0 + quad_form(&self.p_h, z)
    }

    /// Residuals of the prior constraints, g_j(z) = z^T P_j z.
    pub fn prior_values(&self, z: &DVector<f64>) -> Vec<f64> {
        self.p_q.iter().map(|p| quad_form(p, z)).collect()
    }

    /// The lever arm block of antenna i (zero-based) inside z.
    pub fn lever_arm(&self, z: &DVector<f64>, i: usize) -> Vector3<f64> {
        Vector3::new(z[3 * i], z[3 * i + 1], z[3 * i + 2])
    }
}

fn quad_form(m: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    (z.transpose() * m * z)[(0, 0)]
}

/// Number of unordered antenna pairs, l = o(o-1)/2.
pub fn pair_count(o: usize) -> usize {
    o * (o - 1) / 2
}

/// Maps a pair id to its (i, j), i < j, enumerated in lexicographic order:
/// (0,1), (0,2), .., (1,2), ... Zero-based on both sides.
pub fn pair_from_id(p: usize, o: usize) -> Result<(usize, usize), QcqpError> {
    let l = pair_count(o);
    if p >= l {
        return Err(QcqpError::InvalidPair { pair: p, pair_count: l });
    }
    let mut index = 0;
    for i in 0..o {
        for j in (i + 1)..o {
            if index == p {
                return Ok((i, j));
            }
            index += 1;
        }
    }
    unreachable!()
}

/// Inverse of [`pair_from_id`].
pub fn pair_id(i: usize, j: usize, o: usize) -> Result<usize, QcqpError> {
    if i >= j || j >= o {
        return Err(QcqpError::InvalidPair { pair: usize::MAX, pair_count: pair_count(o) });
    }
    let mut index = 0;
    for a in 0..o {
        for b in (a + 1)..o {
            if (a, b) == (i, j) {
                return Ok(index);
            }
            index += 1;
        }
    }
    unreachable!()
}

/// Single-antenna measurement matrix M = [R - I | t - b], 3x4. The
/// homogeneous residual M [x^T, mu]^T vanishes exactly on noiseless data.
pub fn build_single_row(a: &Transform, b: &Vector3<f64>) -> DMatrix<f64> {
    let d = a.rotation.to_matrix() - Matrix3::identity();
    let r = a.translation - b;
    let mut m = DMatrix::zeros(3, 4);
    m.view_mut((0, 0), (3, 3)).copy_from(&d);
    m.view_mut((0, 3), (3, 1)).copy_from(&r);
    m
}

/// Multi-antenna measurement matrix M_k^i = [E_i kron (R - I) | e_i kron
/// (t - b_i)], 3o x (3o+1). Only block-row i is populated; it equals the
/// single-antenna matrix for antenna i.
pub fn build_multi_row(
    a: &Transform,
    b_i: &Vector3<f64>,
    i: usize,
    o: usize,
) -> Result<DMatrix<f64>, QcqpError> {
    if i >= o {
        return Err(QcqpError::AntennaIndexOutOfRange { antenna: i, count: o });
    }
    let d = DMatrix::from_column_slice(3, 3, (a.rotation.to_matrix() - Matrix3::identity()).as_slice());
    let e_outer = basis_outer(o, o, i, i);
    let rot = kron(&e_outer, &d);
    let r = a.translation - b_i;
    let e_col = basis_outer(o, 1, i, 0);
    let col = kron(&e_col, &DMatrix::from_column_slice(3, 1, r.as_slice()));
    let mut m = DMatrix::zeros(3 * o, 3 * o + 1);
    m.view_mut((0, 0), (3 * o, 3 * o)).copy_from(&rot);
    m.view_mut((0, 3 * o), (3 * o, 1)).copy_from(&col);
    Ok(m)
}

/// Cross-antenna regularization matrix for pair p = (i, j): block-row p
/// carries -(R - I) in column block i, +(R - I) in column block j, and
/// b_i - b_j in the homogenization column; 3l x (3o+1) with l = o(o-1)/2.
///
/// The row encodes the rigidity cycle between antennas i and j: their arms
/// can only differ in ways the platform rotation explains.
pub fn build_cross_row(
    a: &Transform,
    b_i: &Vector3<f64>,
    b_j: &Vector3<f64>,
    p: usize,
    o: usize,
) -> Result<DMatrix<f64>, QcqpError> {
    let (i, j) = pair_from_id(p, o)?;
    let l = pair_count(o);
    let d = DMatrix::from_column_slice(3, 3, (a.rotation.to_matrix() - Matrix3::identity()).as_slice());
    let rot = kron(&basis_outer(l, o, p, j), &d) - kron(&basis_outer(l, o, p, i), &d);
    let dv = b_i - b_j;
    let col = kron(&basis_outer(l, 1, p, 0), &DMatrix::from_column_slice(3, 1, dv.as_slice()));
    let mut m = DMatrix::zeros(3 * l, 3 * o + 1);
    m.view_mut((0, 0), (3 * l, 3 * o)).copy_from(&rot);
    m.view_mut((0, 3 * o), (3 * l, 1)).copy_from(&col);
    Ok(m)
}

/// The homogenization constraint matrix: zeros except (n-1, n-1) = -1, so
/// that 1 + z^T P_h z = 1 - mu^2 vanishes exactly when mu^2 = 1.
pub fn homogenization_matrix(n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    p[(n - 1, n - 1)] = -1.0;
    p
}

fn validated_antenna_count(steps: &[MotionStep]) -> Result<usize, QcqpError> {
    let first = steps.first().ok_or(QcqpError::EmptyDataset)?;
    let o = first.antenna_count();
    if o == 0 {
        return Err(QcqpError::EmptyDataset);
    }
    for (k, step) in steps.iter().enumerate() {
        if step.antenna_count() != o {
            return Err(QcqpError::InconsistentAntennaCount {
                step: k,
                expected: o,
                found: step.antenna_count(),
            });
        }
    }
    Ok(o)
}

/// Accumulates Q = sum over steps (and antenna pairs, when regularizing) of
/// M^T M, without materializing the stacked M matrices.
///
/// Each per-antenna row only touches the (i, i) diagonal block, the (i, mu)
/// column, and the (mu, mu) corner; each regularization row touches the
/// blocks of its pair. Exploiting that keeps construction O(1) per antenna
/// per step. Each step's contribution is gathered in a scratch matrix and
/// added to Q in one pass, so accumulating a concatenation of datasets
/// reproduces, bit for bit, continuing the fold from the first dataset's Q.
pub fn accumulate(steps: &[MotionStep], use_regularization: bool) -> Result<QcqpProblem, QcqpError> {
    let o = validated_antenna_count(steps)?;
    let n = 3 * o + 1;
    let mut q = DMatrix::<f64>::zeros(n, n);
    let mut c_step = DMatrix::<f64>::zeros(n, n);
    for step in steps {
        c_step.fill(0.0);
        let rot = step.imu_motion.rotation.to_matrix();
        let d = rot - Matrix3::identity();
        let g = d.transpose() * d;
        let t = step.imu_motion.translation;
        for i in 0..o {
            let r = t - step.antenna_motions[i];
            add_block3(&mut c_step, 3 * i, 3 * i, &g);
            let c = d.transpose() * r;
            add_mu_column(&mut c_step, 3 * i, n, &c);
            c_step[(n - 1, n - 1)] += r.dot(&r);
        }
        if use_regularization && o >= 2 {
            for i in 0..o {
                for j in (i + 1)..o {
                    let dv = step.antenna_motions[i] - step.antenna_motions[j];
                    add_block3(&mut c_step, 3 * i, 3 * i, &g);
                    add_block3(&mut c_step, 3 * j, 3 * j, &g);
                    let neg_g = -g;
                    add_block3(&mut c_step, 3 * i, 3 * j, &neg_g);
                    add_block3(&mut c_step, 3 * j, 3 * i, &neg_g);
                    let c = d.transpose() * dv;
                    add_mu_column(&mut c_step, 3 * i, n, &(-c));
                    add_mu_column(&mut c_step, 3 * j, n, &c);
                    c_step[(n - 1, n - 1)] += dv.dot(&dv);
                }
            }
        }
        q += &c_step;
    }
    Ok(QcqpProblem {
        o,
        n,
        q_matrix: q,
        p_h: homogenization_matrix(n),
        p_q: vec![],
        priors: vec![],
        use_regularization,
    })
}

fn add_block3(q: &mut DMatrix<f64>, r0: usize, c0: usize, m: &Matrix3<f64>) {
    for a in 0..3 {
        for b in 0..3 {
            q[(r0 + a, c0 + b)] += m[(a, b)];
        }
    }
}

fn add_mu_column(q: &mut DMatrix<f64>, r0: usize, n: usize, v: &Vector3<f64>) {
    for a in 0..3 {
        q[(r0 + a, n - 1)] += v[a];
        q[(n - 1, r0 + a)] += v[a];
    }
}

/// Builds the homogenization matrix and one constraint matrix per prior.
///
/// ArmLength(i, s) yields P = diag(.., I_3 at block i, .., -s^2), so
/// z^T P z = ||x_i||^2 - s^2 mu^2. ComponentMagnitude keeps a single 1 on
/// the diagonal instead of the whole identity block.
pub fn build_constraints(
    priors: &[PriorConstraint],
    o: usize,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>), QcqpError> {
    let n = 3 * o + 1;
    let p_h = homogenization_matrix(n);
    let mut p_q = Vec::with_capacity(priors.len());
    for prior in priors {
        let antenna = prior.antenna();
        if antenna >= o {
            return Err(QcqpError::AntennaIndexOutOfRange { antenna, count: o });
        }
        let mut p = DMatrix::zeros(n, n);
        match *prior {
            PriorConstraint::ArmLength { length, .. } => {
                if length.is_nan() || length <= 0.0 {
                    return Err(QcqpError::NonPositiveArmLength { antenna, length });
                }
                for a in 0..3 {
                    p[(3 * antenna + a, 3 * antenna + a)] = 1.0;
                }
                p[(n - 1, n - 1)] = -length * length;
            }
            PriorConstraint::ComponentMagnitude { axis, magnitude, .. } => {
                if magnitude.is_nan() || magnitude < 0.0 {
                    return Err(QcqpError::NegativeMagnitude { antenna, magnitude });
                }
                p[(3 * antenna + axis.index(), 3 * antenna + axis.index())] = 1.0;
                p[(n - 1, n - 1)] = -magnitude * magnitude;
            }
        }
        p_q.push(p);
    }
    Ok((p_h, p_q))
}

/// Observability classification of a motion dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionVerdict {
    /// At least two non-colinear rotation axes: the full lever arm is
    /// observable.
    FullyObservable,
    /// A single effective rotation axis: the component along it needs prior
    /// knowledge (arm length or z-component).
    PlanarOnly,
    /// No usable rotation at all; calibration is impossible.
    Degenerate,
}

impl fmt::Display for MotionVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MotionVerdict::FullyObservable => "fully-observable",
            MotionVerdict::PlanarOnly => "planar-only",
            MotionVerdict::Degenerate => "degenerate",
        };
        f.write_str(s)
    }
}

/// Result of [`assess_motion`]: per-antenna measurement-matrix ranks, the
/// rotation-axis spread, and the observability verdict.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionAssessment {
    /// Numerical rank of the stacked [R - I | t - b_i] matrix per antenna.
    /// Noiseless observable data sits at 3 (the ground-truth direction spans
    /// the null space); noisy data typically reaches 4.
    pub antenna_ranks: Vec<usize>,
    /// Numerical rank of the stacked rotation columns R - I alone; 3 needs
    /// non-colinear axes, colinear axes cap it at 2.
    pub rotation_rank: usize,
    /// The two largest principal spread angles (radians, descending) of the
    /// rotation-axis cloud: how far the axes extend away from the dominant
    /// axis along the second and third principal directions.
    pub principal_spread: [f64; 2],
    /// Maximum pairwise angle between rotation axes (radians), treating
    /// opposite axes as colinear; subsampled on large datasets.
    pub max_pairwise_axis_angle: f64,
    /// Steps whose rotation angle exceeds [`AXIS_ANGLE_GATE`].
    pub rotating_steps: usize,
    pub verdict: MotionVerdict,
}

/// Classifies whether the dataset's rotations make the lever arms
/// observable: full rank needs at least two non-colinear rotation axes, a
/// single axis leaves the along-axis component undetermined, and no
/// rotation at all leaves every arm undetermined.
pub fn assess_motion(steps: &[MotionStep]) -> Result<MotionAssessment, QcqpError> {
    let o = validated_antenna_count(steps)?;
    let k = steps.len();
    let mut rot_stack = DMatrix::<f64>::zeros(3 * k, 3);
    let mut antenna_stacks: Vec<DMatrix<f64>> = (0..o).map(|_| DMatrix::zeros(3 * k, 4)).collect();
    let mut axes: Vec<Vector3<f64>> = Vec::new();
    for (idx, step) in steps.iter().enumerate() {
        let rot = step.imu_motion.rotation.to_matrix();
        let d = rot - Matrix3::identity();
        rot_stack.view_mut((3 * idx, 0), (3, 3)).copy_from(&d);
        let (axis, angle) = step.imu_motion.rotation.axis_angle();
        if angle > AXIS_ANGLE_GATE {
            axes.push(axis);
        }
        for (stack, motion) in antenna_stacks.iter_mut().zip(&step.antenna_motions) {
            let r = step.imu_motion.translation - motion;
            stack.view_mut((3 * idx, 0), (3, 3)).copy_from(&d);
            stack.view_mut((3 * idx, 3), (3, 1)).copy_from(&r);
        }
    }

    let antenna_ranks = antenna_stacks.iter().map(stacked_rank).collect();
    let rotation_rank = stacked_rank(&rot_stack);
    let principal_spread = principal_spread_angles(&axes);
    let max_pairwise = max_pairwise_axis_angle(&axes);

    let verdict = if axes.is_empty() {
        MotionVerdict::Degenerate
    } else if rotation_rank <= 2 || max_pairwise < AXIS_SPREAD_THRESHOLD {
        MotionVerdict::PlanarOnly
    } else {
        MotionVerdict::FullyObservable
    };

    Ok(MotionAssessment {
        antenna_ranks,
        rotation_rank,
        principal_spread,
        max_pairwise_axis_angle: max_pairwise,
        rotating_steps: axes.len(),
        verdict,
    })
}

/// Numerical rank: singular values below [`RANK_TOLERANCE`] relative to
/// the largest count as zero.
fn stacked_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let mut sigma: Vec<f64> = sv.iter().cloned().collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if sigma.first().is_none_or(|&s| s <= 0.0) {
        return 0;
    }
    sigma.iter().filter(|&&s| s > RANK_TOLERANCE * sigma[0]).count()
}

fn principal_spread_angles(axes: &[Vector3<f64>]) -> [f64; 2] {
    use nalgebra::{ComplexField, RealField};
    if axes.is_empty() {
        return [0.0, 0.0];
    }
    let mut scatter = Matrix3::<f64>::zeros();
    for a in axes {
        scatter += a * a.transpose();
    }
    scatter /= axes.len() as f64;
    let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().cloned().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top = ComplexField::sqrt(eig[0].max(0.0));
    if top <= 0.0 {
        return [0.0, 0.0];
    }
    [
        RealField::atan2(ComplexField::sqrt(eig[1].max(0.0)), top),
        RealField::atan2(ComplexField::sqrt(eig[2].max(0.0)), top),
    ]
}

fn max_pairwise_axis_angle(axes: &[Vector3<f64>]) -> f64 {
    use nalgebra::ComplexField;
    if axes.len() < 2 {
        return 0.0;
    }
    let stride = axes.len().div_ceil(MAX_SPREAD_SAMPLES);
    let sampled: Vec<&Vector3<f64>> = axes.iter().step_by(stride).collect();
    let mut min_abs_dot = 1.0f64;
    for (idx, a) in sampled.iter().enumerate() {
        for b in sampled.iter().skip(idx + 1) {
            let dot = ComplexField::abs(a.dot(b)).min(1.0);
            if dot < min_abs_dot {
                min_abs_dot = dot;
            }
        }
    }
    ComplexField::acos(min_abs_dot)
}
