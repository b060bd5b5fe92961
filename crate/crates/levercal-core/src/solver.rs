//! Solves the calibration QCQP through its Lagrangian dual, recovers the
//! lever arms from the null space of the dual certificate matrix, and
//! labels each result with how strongly optimality is established.
//!
//! The dual of "minimize z^T Q z subject to quadratic equalities" asks for
//! multipliers lambda maximizing lambda_1 (the homogenization multiplier)
//! while keeping Z(lambda) = Q + lambda_1 P_h + sum lambda_j P_j positive
//! semidefinite. Any feasible lambda_1 lower-bounds every feasible primal
//! cost (weak duality), so a primal candidate whose cost meets the bound is
//! globally optimal. Without priors the dual reduces to a Schur-complement
//! closed form; with priors a short interior-point climb solves it. All
//! constraint matrices are diagonal, which keeps every barrier derivative a
//! few dot products.

use alloc::string::String;
use alloc::{vec, vec::Vec};
use core::fmt;

use nalgebra::{Cholesky, ComplexField, DMatrix, DVector, Dyn, Vector3};

use crate::qcqp::{
    accumulate, assess_motion, Axis, MotionStep, MotionVerdict, PriorConstraint, QcqpError,
    QcqpProblem,
};

/// Fraction of the largest eigenvalue of Z below which an eigenvalue
/// counts as part of the null space (combined with the absolute floor in
/// [`CalibrateOptions::null_tolerance`]).
pub const NULL_RELATIVE_TOLERANCE: f64 = 1e-6;
/// A recovered candidate must satisfy every constraint to this tolerance.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-7;
/// Iteration cap of the local refinement.
pub const REFINE_MAX_ITERATIONS: usize = 200;

/// How the solution's optimality is established.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Certificate {
    /// Recovered directly from a one- or two-dimensional null space with a
    /// closed duality gap: globally optimal by construction.
    CertifiedGlobal,
    /// Obtained through local refinement, then found to close the duality
    /// gap: globality verified after the fact.
    VerifiedGlobal,
    /// The duality gap stayed open; the solution is only known to be a
    /// feasible stationary point.
    LocalOnly,
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Certificate::CertifiedGlobal => "certified-global",
            Certificate::VerifiedGlobal => "verified-global",
            Certificate::LocalOnly => "local-only",
        };
        f.write_str(s)
    }
}

/// What to do with the sign ambiguity of planar-motion solutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignPolicy {
    /// Leave the solution as recovered; when priors are present the cost of
    /// the mirrored candidate is reported alongside.
    #[default]
    None,
    /// The antennas are mounted above the IMU: force every lever arm's
    /// z-component non-negative, re-evaluating cost and certificate.
    AboveImu,
}

/// Tuning knobs of [`calibrate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrateOptions {
    /// Accumulate cross-antenna regularization rows.
    pub use_regularization: bool,
    /// Relative duality-gap tolerance for declaring global optimality.
    pub gap_tolerance: f64,
    /// Absolute floor of the null-space eigenvalue threshold.
    pub null_tolerance: f64,
    pub sign_policy: SignPolicy,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            use_regularization: false,
            gap_tolerance: 1e-6,
            null_tolerance: 1e-8,
            sign_policy: SignPolicy::None,
        }
    }
}

/// A dual-feasible point and the spectral decomposition of its certificate
/// matrix Z(lambda).
#[derive(Clone, Debug)]
pub struct DualSolution {
    /// Multipliers; index 0 is the homogenization multiplier lambda_1,
    /// whose value is the dual bound on the primal cost.
    pub lambda: DVector<f64>,
    /// Z(lambda) = Q + lambda_1 P_h + sum lambda_j P_j.
    pub z_matrix: DMatrix<f64>,
    /// Eigenvalues of Z, ascending.
    pub eigenvalues: DVector<f64>,
    /// Matching eigenvectors, one per column.
    pub eigenvectors: DMatrix<f64>,
}

impl DualSolution {
    pub fn dual_bound(&self) -> f64 {
        self.lambda[0]
    }
}

/// A primal candidate pulled out of the null space of Z.
#[derive(Clone, Debug)]
pub struct RecoveredPrimal {
    /// Homogeneous solution with mu normalized to +1.
    pub z: DVector<f64>,
    pub null_space_dim: usize,
    /// Whether local refinement produced the candidate (direct null-space
    /// recovery was not possible or not feasible).
    pub refined: bool,
    /// False when refinement hit its iteration cap before meeting the
    /// feasibility and step tolerances.
    pub converged: bool,
}

/// Result of local refinement.
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub z: DVector<f64>,
    /// False when the iteration cap was reached; `z` is then the best
    /// feasible iterate seen.
    pub converged: bool,
}

/// The calibrated lever arms with their optimality evidence.
#[derive(Clone, Debug)]
pub struct CalibrationResult {
    /// One lever arm per antenna, meters in the IMU frame.
    pub lever_arms: Vec<Vector3<f64>>,
    /// Homogenization scalar, normalized to +1.
    pub mu: f64,
    /// J at the returned solution.
    pub primal_cost: f64,
    /// Best dual lower bound lambda_1.
    pub dual_bound: f64,
    /// primal_cost - dual_bound; certifiably global when relatively small.
    pub duality_gap: f64,
    pub certificate: Certificate,
    pub null_space_dim: usize,
    /// Whether the solution came from local refinement.
    pub refined: bool,
    /// Cost of the mirrored (all lever-arm z-components negated) candidate,
    /// reported when priors leave the sign ambiguous and no policy applies.
    pub alternate_cost: Option<f64>,
}

/// Errors from the solve pipeline.
#[derive(Clone, Debug, PartialEq)]
pub enum SolveError {
    Construction(QcqpError),
    /// The dataset contains no usable rotation; no lever arm is observable.
    DegenerateMotion,
    /// Planar motion leaves the along-axis component free; every antenna
    /// needs an arm-length or z-component prior.
    PlanarNeedsPrior { antenna: usize },
    DualSolveFailed(String),
    /// No constraint-feasible candidate exists in the null space.
    NoFeasibleRecovery,
    /// The refinement start has a vanishing homogenization component.
    InvalidStart,
}

impl fmt::Display for SolveError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::Construction(e) => write!(f, "problem construction failed: {e}"),
            SolveError::DegenerateMotion => {
                write!(f, "motion is degenerate (no rotation); lever arms are unobservable")
            }
            SolveError::PlanarNeedsPrior { antenna } => write!(
                f,
                "planar motion: antenna {antenna} needs an arm-length or z-component prior"
            ),
            SolveError::DualSolveFailed(msg) => write!(f, "dual solve failed: {msg}"),
            SolveError::NoFeasibleRecovery => {
                write!(f, "no constraint-feasible solution found in the null space")
            }
            SolveError::InvalidStart => {
                write!(f, "refinement start has a vanishing homogenization component")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SolveError {}

impl From<QcqpError> for SolveError {
    fn from(e: QcqpError) -> Self {
        SolveError::Construction(e)
    }
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations, eigenvalues ascending with matching orthonormal columns.
///
/// The certificate lives or dies by its null space, and nalgebra's
/// tridiagonalization-based routine can return spurious eigenvectors for
/// near-singular matrices (observed: residual norms around 1e-1 on a
/// well-conditioned 10x10 input). Jacobi rotations keep every vector
/// orthonormal by construction and converge quadratically at these sizes.
fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut vectors = DMatrix::<f64>::identity(n, n);
    let scale: f64 = m.iter().map(|x| x * x).sum();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if ComplexField::abs(apq) == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (ComplexField::abs(theta) + ComplexField::sqrt(theta * theta + 1.0));
                let c = 1.0 / ComplexField::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vectors[(k, p)];
                    let vkq = vectors[(k, q)];
                    vectors[(k, p)] = c * vkp - s * vkq;
                    vectors[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap());
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut sorted = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        sorted.set_column(dst, &vectors.column(src));
    }
    (values, sorted)
}

/// Least-squares solve of a symmetric PSD system through its spectrum,
/// ignoring directions with eigenvalues below 1e-12 of the largest.
fn psd_pinv_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (values, vectors) = sorted_symmetric_eigen(m);
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-12 * max;
    let mut x = DVector::zeros(b.len());
    for i in 0..values.len() {
        if values[i] > tol {
            let v = vectors.column(i);
            x += v * (v.dot(b) / values[i]);
        }
    }
    x
}

fn z_of(q: &DMatrix<f64>, diag_cols: &DMatrix<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let mut z = q.clone();
    for d in 0..n {
        for j in 0..lambda.len() {
            z[(d, d)] += lambda[j] * diag_cols[(d, j)];
        }
    }
    z
}

fn log_det_half(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    (0..l.nrows()).map(|i| ComplexField::ln(l[(i, i)])).sum()
}

/// Closed-form dual optimum when the homogenization constraint is the only
/// one: lambda_1 = q_nn - q^T Q11^+ q by the Schur complement criterion for
/// Z(lambda_1) >= 0.
fn closed_form_lambda(problem: &QcqpProblem) -> DVector<f64> {
    let n = problem.n;
    let q11 = problem.q_matrix.view((0, 0), (n - 1, n - 1)).clone_owned();
    let q_col = problem.q_matrix.view((0, n - 1), (n - 1, 1)).clone_owned();
    let rhs = DVector::from_column_slice(q_col.as_slice());
    let x_hat = match Cholesky::new(q11.clone()) {
        Some(ch) => -ch.solve(&rhs),
        None => -psd_pinv_solve(&q11, &rhs),
    };
    let mut lambda = DVector::zeros(1 + problem.p_q.len());
    lambda[0] = problem.q_matrix[(n - 1, n - 1)] + rhs.dot(&x_hat);
    lambda
}

/// Interior-point climb for the constrained dual: maximize
/// t * lambda_1 + log det Z(lambda) over strictly feasible lambda, for an
/// increasing schedule of t. Every iterate keeps Z positive definite, so
/// the final lambda_1 is a valid weak-duality bound no matter how early
/// the climb stops.
fn barrier_lambda(problem: &QcqpProblem) -> Result<DVector<f64>, SolveError> {
    let n = problem.n;
    let m = 1 + problem.p_q.len();
    let frob = problem.q_matrix.norm();
    let scale = if frob > 0.0 { frob } else { 1.0 };
    let qs = &problem.q_matrix / scale;

    let mut diag_cols = DMatrix::<f64>::zeros(n, m);
    diag_cols[(n - 1, 0)] = -1.0;
    for (j, p) in problem.p_q.iter().enumerate() {
        for d in 0..n {
            diag_cols[(d, j + 1)] = p[(d, d)];
        }
    }

    let eta = 1e-3 * (qs.trace() / n as f64).max(1.0);
    let mut lambda = DVector::from_element(m, eta);
    let corner_load: f64 = problem.p_q.iter().map(|p| ComplexField::abs(p[(n - 1, n - 1)])).sum();
    lambda[0] = -eta * (1.0 + corner_load) - 1e-3;
    let mut escalations = 0;
    while Cholesky::new(z_of(&qs, &diag_cols, &lambda)).is_none() {
        lambda[0] = lambda[0] * 2.0 - 1.0;
        escalations += 1;
        if escalations > 200 {
            return Err(SolveError::DualSolveFailed(String::from(
                "no strictly feasible dual start found",
            )));
        }
    }

    let t_max = 1e13 * n as f64;
    let mut t = 10.0f64;
    loop {
        for _ in 0..60 {
            let z = z_of(&qs, &diag_cols, &lambda);
            let chol = match Cholesky::new(z) {
                Some(c) => c,
                None => break,
            };
            let f_cur = t * lambda[0] + 2.0 * log_det_half(&chol);
            let w = chol.inverse();
            let mut grad = DVector::zeros(m);
            for j in 0..m {
                grad[j] = (0..n).map(|d| w[(d, d)] * diag_cols[(d, j)]).sum::<f64>();
            }
            grad[0] += t;
            let v = w.map(|x| x * x);
            let mut curv = diag_cols.transpose() * &v * &diag_cols;
            for j in 0..m {
                curv[(j, j)] += 1e-12 * (1.0 + curv[(j, j)]);
            }
            let direction = match Cholesky::new(curv.clone()) {
                Some(ch) => ch.solve(&grad),
                None => match curv.lu().solve(&grad) {
                    Some(d) => d,
                    None => break,
                },
            };
            let decrement = grad.dot(&direction);
            if !decrement.is_finite() {
                return Err(SolveError::DualSolveFailed(String::from(
                    "non-finite Newton decrement",
                )));
            }
            if decrement < 1e-10 {
                break;
            }
            let mut alpha = 1.0f64;
            let mut accepted = false;
            while alpha > 1e-18 {
                let cand = &lambda + &direction * alpha;
                if let Some(ch) = Cholesky::new(z_of(&qs, &diag_cols, &cand)) {
                    let f_new = t * cand[0] + 2.0 * log_det_half(&ch);
                    if f_new > f_cur + 1e-4 * alpha * decrement {
                        lambda = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if t >= t_max {
            break;
        }
        t = (t * 10.0).min(t_max);
    }
    Ok(lambda * scale)
}

/// Solves the dual: the returned multipliers keep Z(lambda) positive
/// semidefinite, so `lambda[0]` lower-bounds every feasible primal cost.
pub fn solve_dual(problem: &QcqpProblem) -> Result<DualSolution, SolveError> {
    let mut lambda = if problem.p_q.is_empty() {
        closed_form_lambda(problem)
    } else {
        match barrier_lambda(problem) {
            Ok(l) => l,
            // A valid (if loose) bound always exists with the prior
            // multipliers pinned to zero.
            Err(_) => closed_form_lambda(problem),
        }
    };

    // Eigen-check feasibility; a too-optimistic closed-form bound (rank
    // deficient Q11) is walked back until Z is numerically PSD. Lowering
    // lambda_1 only grows the corner margin, so this terminates.
    let mut diag_cols = DMatrix::<f64>::zeros(problem.n, lambda.len());
    diag_cols[(problem.n - 1, 0)] = -1.0;
    for (j, p) in problem.p_q.iter().enumerate() {
        for d in 0..problem.n {
            diag_cols[(d, j + 1)] = p[(d, d)];
        }
    }
    let mut z = z_of(&problem.q_matrix, &diag_cols, &lambda);
    let (mut values, mut vectors) = sorted_symmetric_eigen(&z);
    for _ in 0..80 {
        let min = values[0];
        let max = values[values.len() - 1].max(0.0);
        if min >= -1e-12 * max.max(1.0) {
            break;
        }
        lambda[0] += 2.0 * min;
        z = z_of(&problem.q_matrix, &diag_cols, &lambda);
        let (v2, e2) = sorted_symmetric_eigen(&z);
        values = v2;
        vectors = e2;
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(SolveError::DualSolveFailed(String::from("non-finite certificate spectrum")));
    }

    Ok(DualSolution { lambda, z_matrix: z, eigenvalues: values, eigenvectors: vectors })
}

/// Scales a null vector so its homogenization component is +1.
fn normalize_null_vector(v: &DVector<f64>) -> Option<DVector<f64>> {
    let n = v.len();
    let mu = v[n - 1];
    if ComplexField::abs(mu) <= 1e-9 * v.norm() {
        return None;
    }
    Some(v / mu)
}

fn max_constraint_violation(problem: &QcqpProblem, z: &DVector<f64>) -> f64 {
    let mut worst = ComplexField::abs(problem.homogenization_value(z));
    for g in problem.prior_values(z) {
        worst = worst.max(ComplexField::abs(g));
    }
    worst
}

fn extract_lever_arms(z: &DVector<f64>, o: usize) -> Vec<Vector3<f64>> {
    (0..o).map(|i| Vector3::new(z[3 * i], z[3 * i + 1], z[3 * i + 2])).collect()
}

/// Recovers a primal candidate from the null space of Z.
///
/// Dimension 1 normalizes the null vector by its homogenization component;
/// dimension 2 substitutes z = alpha v1 + beta v2 into the first prior,
/// enumerates the real roots of the resulting quadratic in alpha/beta, and
/// keeps the feasible root of lowest cost; anything else seeds local
/// refinement with the null vector of largest eigenvalue (or the least
/// non-null direction when the null space is empty).
pub fn recover_primal(
    dual: &DualSolution,
    problem: &QcqpProblem,
    options: &CalibrateOptions,
) -> Result<RecoveredPrimal, SolveError> {
    let n = problem.n;
    let max_eig = dual.eigenvalues[n - 1].max(0.0);
    let threshold = options.null_tolerance.max(NULL_RELATIVE_TOLERANCE * max_eig);
    let null_dim =
        dual.eigenvalues.iter().filter(|v| ComplexField::abs(**v) <= threshold).count();

    match null_dim {
        1 => {
            let v = dual.eigenvectors.column(0).clone_owned();
            let z = normalize_null_vector(&v).ok_or(SolveError::NoFeasibleRecovery)?;
            if max_constraint_violation(problem, &z) <= FEASIBILITY_TOLERANCE {
                Ok(RecoveredPrimal { z, null_space_dim: 1, refined: false, converged: true })
            } else {
                let refined = refine_best(problem, core::slice::from_ref(&z))?;
                Ok(RecoveredPrimal {
                    z: refined.z,
                    null_space_dim: 1,
                    refined: true,
                    converged: refined.converged,
                })
            }
        }
        2 => {
            let v1 = dual.eigenvectors.column(0).clone_owned();
            let v2 = dual.eigenvectors.column(1).clone_owned();
            recover_dim2(problem, &v1, &v2)
        }
        dim => {
            // Null vector of largest eigenvalue, or the least non-null
            // direction when the null space is empty.
            let column = if dim == 0 { 0 } else { dim - 1 };
            let mut start = None;
            for c in (0..=column).rev() {
                let v = dual.eigenvectors.column(c).clone_owned();
                if let Some(z) = normalize_null_vector(&v) {
                    start = Some(z);
                    break;
                }
            }
            let z0 = start.ok_or(SolveError::NoFeasibleRecovery)?;
            let refined = refine_best(problem, core::slice::from_ref(&z0))?;
            Ok(RecoveredPrimal {
                z: refined.z,
                null_space_dim: dim,
                refined: true,
                converged: refined.converged,
            })
        }
    }
}

/// Two-dimensional null space: enumerate the real roots of every prior's
/// quadratic over the basis, return the lowest-cost feasible root, and
/// fall back to local refinement when no root satisfies all constraints
/// at once (a dual-degenerate instance with a small positive gap).
fn recover_dim2(
    problem: &QcqpProblem,
    v1: &DVector<f64>,
    v2: &DVector<f64>,
) -> Result<RecoveredPrimal, SolveError> {
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    for p in &problem.p_q {
        let c1 = (v1.transpose() * p * v1)[(0, 0)];
        let c2 = (v1.transpose() * p * v2)[(0, 0)];
        let c3 = (v2.transpose() * p * v2)[(0, 0)];
        let scale = ComplexField::abs(c1).max(ComplexField::abs(c2)).max(ComplexField::abs(c3));
        if scale <= 1e-14 * (1.0 + p.norm()) {
            // This prior does not constrain the span.
            continue;
        }
        if ComplexField::abs(c1) <= 1e-12 * scale {
            // Degenerate leading coefficient: one finite root plus the
            // root at infinity (beta = 0).
            if ComplexField::abs(c2) > 1e-12 * scale {
                let t = -c3 / (2.0 * c2);
                candidates.push(v1 * t + v2);
            }
            candidates.push(v1.clone());
        } else {
            let disc = c2 * c2 - c1 * c3;
            if disc >= 0.0 {
                let root = ComplexField::sqrt(disc);
                // Numerically stable quadratic roots.
                let qq = -(c2 + if c2 >= 0.0 { root } else { -root });
                let t1 = qq / c1;
                let t2 = if qq != 0.0 { c3 / qq } else { -c2 / c1 };
                candidates.push(v1 * t1 + v2);
                if t2 != t1 {
                    candidates.push(v1 * t2 + v2);
                }
            }
        }
    }
    if candidates.is_empty() {
        // No prior pins the combination; take the mu-normalized direction.
        candidates.extend(mu_aligned_candidate(v1, v2));
    }

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut starts: Vec<DVector<f64>> = Vec::new();
    for dir in candidates {
        if let Some(z) = normalize_null_vector(&dir) {
            if max_constraint_violation(problem, &z) <= FEASIBILITY_TOLERANCE {
                let cost = problem.cost(&z);
                if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                    best = Some((cost, z));
                }
            } else {
                starts.push(z);
            }
        }
    }
    if let Some((_, z)) = best {
        return Ok(RecoveredPrimal { z, null_space_dim: 2, refined: false, converged: true });
    }

    // No root satisfies every constraint: the problem has no primal
    // optimum inside the null span. Refine each root into the feasible
    // set and keep the cheapest outcome; certification will then judge
    // the remaining gap honestly.
    let outcome = refine_best(problem, &starts)?;
    Ok(RecoveredPrimal {
        z: outcome.z,
        null_space_dim: 2,
        refined: true,
        converged: outcome.converged,
    })
}

/// Rotates a two-dimensional basis so one direction carries the whole
/// homogenization component; used when no prior pins the combination.
fn mu_aligned_candidate(v1: &DVector<f64>, v2: &DVector<f64>) -> Option<DVector<f64>> {
    let n = v1.len();
    let (m1, m2) = (v1[n - 1], v2[n - 1]);
    let norm = ComplexField::sqrt(m1 * m1 + m2 * m2);
    if norm <= 1e-12 {
        return None;
    }
    Some(v1 * (m1 / norm) + v2 * (m2 / norm))
}

/// Refines from every seeded variant of the given starts and returns the
/// cheapest feasible outcome.
fn refine_best(
    problem: &QcqpProblem,
    candidates: &[DVector<f64>],
) -> Result<RefineOutcome, SolveError> {
    let mut best: Option<(f64, RefineOutcome)> = None;
    for z0 in refinement_starts(problem, candidates) {
        if let Ok(outcome) = refine_local(problem, &z0) {
            if max_constraint_violation(problem, &outcome.z) <= FEASIBILITY_TOLERANCE {
                let cost = problem.cost(&outcome.z);
                if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                    best = Some((cost, outcome));
                }
            }
        }
    }
    best.map(|(_, outcome)| outcome).ok_or(SolveError::NoFeasibleRecovery)
}

/// Start points for fallback refinement: each candidate as written, plus
/// variants whose prior-constrained vertical components are re-seated at
/// either sign of a mid-range magnitude.
///
/// Near-planar data leaves each vertical component a mirror pair of cost
/// wells separated by a ridge at zero, and the ridge is itself a critical
/// locus: a start sitting on it refines to a z-collapsed stationary point
/// instead of either well. Seeding both wells per constrained antenna and
/// keeping the cheapest refined outcome escapes the ridge; the sign policy
/// then settles which mirror image is reported.
fn refinement_starts(
    problem: &QcqpProblem,
    candidates: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    const MAX_VARIANTS_PER_CANDIDATE: usize = 81;
    let mut starts: Vec<DVector<f64>> = Vec::new();
    for z0 in candidates {
        let mut variants = vec![z0.clone()];
        for prior in &problem.priors {
            if variants.len() * 3 > MAX_VARIANTS_PER_CANDIDATE {
                break;
            }
            let mut grown = Vec::with_capacity(variants.len() * 3);
            for v in &variants {
                for sign in [1.0, -1.0] {
                    if let Some(reseated) = reseat_vertical(v, prior, sign) {
                        grown.push(reseated);
                    }
                }
            }
            variants.extend(grown);
        }
        starts.extend(variants);
    }
    starts
}

/// Rewrites one antenna's vertical component to `sign` times a mid-range
/// magnitude consistent with the prior, keeping the horizontal heading.
/// Priors that do not pin the vertical component return nothing.
fn reseat_vertical(
    z: &DVector<f64>,
    prior: &PriorConstraint,
    sign: f64,
) -> Option<DVector<f64>> {
    match *prior {
        PriorConstraint::ArmLength { antenna, length } => {
            let i = 3 * antenna;
            let vertical = sign * length * core::f64::consts::FRAC_1_SQRT_2;
            let horizontal = ComplexField::sqrt(length * length - vertical * vertical);
            let rho = ComplexField::sqrt(z[i] * z[i] + z[i + 1] * z[i + 1]);
            let mut out = z.clone();
            if rho > 1e-12 * (1.0 + ComplexField::abs(length)) {
                out[i] = z[i] * horizontal / rho;
                out[i + 1] = z[i + 1] * horizontal / rho;
            } else {
                out[i] = horizontal;
                out[i + 1] = 0.0;
            }
            out[i + 2] = vertical;
            Some(out)
        }
        PriorConstraint::ComponentMagnitude { antenna, axis, magnitude } => {
            if axis != Axis::Z {
                return None;
            }
            let mut out = z.clone();
            out[3 * antenna + 2] = sign * ComplexField::abs(magnitude);
            Some(out)
        }
    }
}

/// Exact projection onto the constraint set: normalizes the homogenization
/// entry, rescales arms with a length prior radially, and snaps
/// magnitude-pinned components while keeping their sign.
fn project_onto_priors(problem: &QcqpProblem, z: &mut DVector<f64>) {
    let n = problem.n;
    let mu = z[n - 1];
    *z /= mu;
    for prior in &problem.priors {
        match *prior {
            PriorConstraint::ArmLength { antenna, length } => {
                let i = 3 * antenna;
                let arm = Vector3::new(z[i], z[i + 1], z[i + 2]);
                let norm = arm.norm();
                let scaled = if norm > 1e-12 {
                    arm * (length / norm)
                } else {
                    // A zero arm has no radial direction to keep.
                    Vector3::new(0.0, 0.0, length)
                };
                z[i] = scaled[0];
                z[i + 1] = scaled[1];
                z[i + 2] = scaled[2];
            }
            PriorConstraint::ComponentMagnitude { antenna, axis, magnitude } => {
                let idx = 3 * antenna + axis.index();
                z[idx] = if z[idx] >= 0.0 { magnitude } else { -magnitude };
            }
        }
    }
}

/// Projects the start onto the constraints, then walks projected Newton
/// steps: each KKT direction of the exact quadratic model is followed by a
/// projection back onto the priors before the decrease test, so iterates
/// stay feasible and the line search measures cost alone. A penalty-based
/// search would stall instead: on a curved constraint every tangent step
/// picks up a quadratic violation penalty, freezing the iterate where it
/// started. Returns the best iterate seen.
pub fn refine_local(problem: &QcqpProblem, z0: &DVector<f64>) -> Result<RefineOutcome, SolveError> {
    let n = problem.n;
    let mut z = z0.clone();
    if ComplexField::abs(z[n - 1]) <= 1e-12 * z.norm().max(1.0) {
        return Err(SolveError::InvalidStart);
    }
    project_onto_priors(problem, &mut z);

    let m = 1 + problem.p_q.len();
    let q2 = &problem.q_matrix * 2.0;
    let gamma = 1e-10 * problem.q_matrix.norm().max(1.0);

    let mut best: Option<(f64, DVector<f64>)> = None;
    let record = |problem: &QcqpProblem, z: &DVector<f64>, best: &mut Option<(f64, DVector<f64>)>| {
        if max_constraint_violation(problem, z) <= 1e-9 {
            let cost = problem.cost(z);
            if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                *best = Some((cost, z.clone()));
            }
        }
    };
    record(problem, &z, &mut best);

    let mut converged = false;
    for _ in 0..REFINE_MAX_ITERATIONS {
        // Residuals and constraint Jacobian rows (2 P z)^T.
        let mut g = DVector::zeros(m);
        g[0] = problem.homogenization_value(&z);
        for (j, val) in problem.prior_values(&z).iter().enumerate() {
            g[j + 1] = *val;
        }
        let mut jac = DMatrix::zeros(m, n);
        let ph_row = &problem.p_h * &z * 2.0;
        jac.row_mut(0).copy_from(&ph_row.transpose());
        for (j, p) in problem.p_q.iter().enumerate() {
            let row = p * &z * 2.0;
            jac.row_mut(j + 1).copy_from(&row.transpose());
        }

        // KKT system of the exact quadratic model with linearized
        // constraints.
        let dim = n + m;
        let mut kkt = DMatrix::zeros(dim, dim);
        for r in 0..n {
            for c in 0..n {
                kkt[(r, c)] = q2[(r, c)];
            }
            kkt[(r, r)] += gamma;
        }
        for r in 0..m {
            for c in 0..n {
                kkt[(n + r, c)] = jac[(r, c)];
                kkt[(c, n + r)] = jac[(r, c)];
            }
        }
        let mut rhs = DVector::zeros(dim);
        let grad = &q2 * &z;
        for r in 0..n {
            rhs[r] = -grad[r];
        }
        for r in 0..m {
            rhs[n + r] = -g[r];
        }
        let sol = match kkt.lu().solve(&rhs) {
            Some(s) => s,
            None => break,
        };
        let d = sol.rows(0, n).clone_owned();

        let cost0 = problem.cost(&z);
        let mut alpha = 1.0f64;
        let mut stepped = false;
        while alpha > 1e-16 {
            let mut cand = &z + &d * alpha;
            if ComplexField::abs(cand[n - 1]) > 1e-6 {
                project_onto_priors(problem, &mut cand);
                if problem.cost(&cand) < cost0 - 1e-14 * (1.0 + ComplexField::abs(cost0)) {
                    z = cand;
                    stepped = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !stepped {
            // No projected decrease along the model direction: stationary.
            converged = true;
            break;
        }
        record(problem, &z, &mut best);
        if (alpha * d.norm()) <= 1e-12 * (1.0 + z.norm()) {
            converged = true;
            break;
        }
    }
    record(problem, &z, &mut best);

    let mut out = match best {
        Some((_, zb)) => zb,
        None => {
            converged = false;
            z
        }
    };
    if ComplexField::abs(out[n - 1]) <= 1e-12 {
        return Err(SolveError::InvalidStart);
    }
    out /= out[n - 1];
    Ok(RefineOutcome { z: out, converged })
}

/// Labels a solution: a closed relative duality gap is a global-optimality
/// proof, direct (certified) when the null space produced the candidate,
/// after-the-fact (verified) when refinement did.
pub fn certify(
    primal_cost: f64,
    dual_bound: f64,
    null_space_dim: usize,
    refined: bool,
    gap_tolerance: f64,
) -> Certificate {
    let rel_gap = (primal_cost - dual_bound) / (1.0 + ComplexField::abs(primal_cost));
    if rel_gap <= gap_tolerance && rel_gap >= -10.0 * gap_tolerance {
        if !refined && (null_space_dim == 1 || null_space_dim == 2) {
            Certificate::CertifiedGlobal
        } else {
            Certificate::VerifiedGlobal
        }
    } else {
        Certificate::LocalOnly
    }
}

fn rebuild_z(result: &CalibrationResult) -> DVector<f64> {
    let o = result.lever_arms.len();
    let mut z = DVector::zeros(3 * o + 1);
    for (i, arm) in result.lever_arms.iter().enumerate() {
        z[3 * i] = arm[0];
        z[3 * i + 1] = arm[1];
        z[3 * i + 2] = arm[2];
    }
    z[3 * o] = result.mu;
    z
}

/// Applies a sign policy to the planar up-axis ambiguity. Under
/// [`SignPolicy::AboveImu`] every lever arm with a negative z-component is
/// mirrored, and cost, gap, and certificate are re-evaluated; mirroring
/// preserves all prior constraints, so feasibility survives. Under
/// [`SignPolicy::None`] the result is returned unchanged, except that the
/// mirrored candidate's cost is reported when priors are present.
pub fn disambiguate_sign(
    result: CalibrationResult,
    policy: SignPolicy,
    problem: &QcqpProblem,
    gap_tolerance: f64,
) -> CalibrationResult {
    match policy {
        SignPolicy::None => {
            if problem.p_q.is_empty() {
                return result;
            }
            let mut mirrored = result.clone();
            for arm in &mut mirrored.lever_arms {
                arm[2] = -arm[2];
            }
            let alt_cost = problem.cost(&rebuild_z(&mirrored));
            CalibrationResult { alternate_cost: Some(alt_cost), ..result }
        }
        SignPolicy::AboveImu => {
            let mut flipped = result.clone();
            let mut changed = false;
            for arm in &mut flipped.lever_arms {
                if arm[2] < 0.0 {
                    arm[2] = -arm[2];
                    changed = true;
                }
            }
            if !changed {
                return result;
            }
            let z = rebuild_z(&flipped);
            let cost = problem.cost(&z);
            flipped.primal_cost = cost;
            flipped.duality_gap = cost - flipped.dual_bound;
            flipped.certificate = certify(
                cost,
                flipped.dual_bound,
                flipped.null_space_dim,
                flipped.refined,
                gap_tolerance,
            );
            flipped.alternate_cost = None;
            flipped
        }
    }
}

/// End-to-end calibration: observability gate, problem assembly, dual
/// solve, null-space recovery, certification, and sign disambiguation.
///
/// Planar datasets are admitted only when every antenna carries a prior
/// that pins the along-axis component (arm length or z-component).
pub fn calibrate(
    steps: &[MotionStep],
    priors: &[PriorConstraint],
    options: &CalibrateOptions,
) -> Result<CalibrationResult, SolveError> {
    let assessment = assess_motion(steps)?;
    match assessment.verdict {
        MotionVerdict::Degenerate => return Err(SolveError::DegenerateMotion),
        MotionVerdict::PlanarOnly => {
            let o = steps[0].antenna_count();
            for antenna in 0..o {
                let covered = priors
                    .iter()
                    .any(|p| p.antenna() == antenna && p.covers_planar_deficit());
                if !covered {
                    return Err(SolveError::PlanarNeedsPrior { antenna });
                }
            }
        }
        MotionVerdict::FullyObservable => {}
    }

    let problem = accumulate(steps, options.use_regularization)?.with_priors(priors)?;
    let dual = solve_dual(&problem)?;
    let recovery = recover_primal(&dual, &problem, options)?;

    let primal_cost = problem.cost(&recovery.z);
    let dual_bound = dual.dual_bound();
    let certificate = certify(
        primal_cost,
        dual_bound,
        recovery.null_space_dim,
        recovery.refined,
        options.gap_tolerance,
    );
    let result = CalibrationResult {
        lever_arms: extract_lever_arms(&recovery.z, problem.o),
        mu: recovery.z[problem.n - 1],
        primal_cost,
        dual_bound,
        duality_gap: primal_cost - dual_bound,
        certificate,
        null_space_dim: recovery.null_space_dim,
        refined: recovery.refined,
        alternate_cost: None,
    };
    Ok(disambiguate_sign(result, options.sign_policy, &problem, options.gap_tolerance))
}
