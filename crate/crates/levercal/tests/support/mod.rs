//! Independent reference solver for the acceptance suite: multi-start
//! Gauss-Newton on the raw motion residuals, sharing no code with the
//! library's quadratic-form pipeline.

use levercal_core::qcqp::MotionStep;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best minimum found over all starts.
pub struct OracleSolution {
    /// One estimated lever arm per antenna.
    pub arms: Vec<Vector3<f64>>,
    /// Sum of squared residuals at the minimum.
    pub cost: f64,
}

/// Sum of squared residuals (R_k - I) x_i + t_k - b_ik over all steps
/// and antennas, with x the stacked per-antenna arm vector.
fn cost_at(steps: &[MotionStep], x: &DVector<f64>, antennas: usize) -> f64 {
    let mut total = 0.0;
    for step in steps {
        let d = step.imu_motion.rotation.to_matrix() - Matrix3::identity();
        for i in 0..antennas {
            let arm = Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
            let r = d * arm + step.imu_motion.translation - step.antenna_motions[i];
            total += r.norm_squared();
        }
    }
    total
}

/// One Gauss-Newton descent to convergence from `start`.
fn gauss_newton(steps: &[MotionStep], antennas: usize, start: DVector<f64>) -> (DVector<f64>, f64) {
    let dim = 3 * antennas;
    let mut x = start;
    for _ in 0..60 {
        let mut normal = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for step in steps {
            let d = step.imu_motion.rotation.to_matrix() - Matrix3::identity();
            let g = d.transpose() * d;
            for i in 0..antennas {
                let arm = Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]);
                let r = d * arm + step.imu_motion.translation - step.antenna_motions[i];
                let grad = d.transpose() * r;
                for a in 0..3 {
                    rhs[3 * i + a] -= grad[a];
                    for b in 0..3 {
                        normal[(3 * i + a, 3 * i + b)] += g[(a, b)];
                    }
                }
            }
        }
        let delta = match normal.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => break,
        };
        let step_norm = delta.norm();
        x += delta;
        if step_norm <= 1e-13 * (1.0 + x.norm()) {
            break;
        }
    }
    let cost = cost_at(steps, &x, antennas);
    (x, cost)
}

/// Runs Gauss-Newton from `starts` random points in [-3, 3]^(3o) and
/// returns the cheapest minimum found.
pub fn multi_start_nls(steps: &[MotionStep], starts: usize, seed: u64) -> OracleSolution {
    let antennas = steps[0].antenna_count();
    let dim = 3 * antennas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(DVector<f64>, f64)> = None;
    for _ in 0..starts {
        let start = DVector::from_iterator(dim, (0..dim).map(|_| rng.gen_range(-3.0f64..3.0)));
        let (x, cost) = gauss_newton(steps, antennas, start);
        if best.as_ref().map_or(true, |(_, c)| cost < *c) {
            best = Some((x, cost));
        }
    }
    let (x, cost) = best.expect("at least one start");
    let arms = (0..antennas)
        .map(|i| Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
        .collect();
    OracleSolution { arms, cost }
}
