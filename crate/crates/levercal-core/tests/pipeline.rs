//! End-to-end checks of the calibration pipeline on simulated motion:
//! recovery accuracy, duality bookkeeping, and the symmetries the
//! estimate must inherit from the measurement model.

use levercal_core::qcqp::accumulate;
use levercal_core::sim::{
    add_noise, simulate, NoiseLevel, NoiseMode, PathKind, SimConfig, Surface,
};
use levercal_core::solver::{calibrate, SignPolicy, SolveError};
use levercal_core::{CalibrateOptions, Certificate, MotionStep, PriorConstraint, Rotation};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draws a lever arm with components in [-0.8, 0.8] m and length at
/// least 0.15 m so priors built from it stay well conditioned.
fn random_arm(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let arm = Vector3::new(
            rng.gen_range(-0.8f64..0.8),
            rng.gen_range(-0.8f64..0.8),
            rng.gen_range(-0.8f64..0.8),
        );
        if arm.norm() >= 0.15 && arm.z.abs() >= 0.1 {
            return arm;
        }
    }
}

fn hilly_dataset(arms: Vec<Vector3<f64>>, steps: usize, seed: u64) -> Vec<MotionStep> {
    simulate(&SimConfig::hilly(steps, arms, seed)).unwrap().steps
}

/// Solves the stacked linear system (R_k - I) x = b_k - t_k per antenna
/// by SVD least squares, bypassing the quadratic-form machinery.
fn linear_oracle(steps: &[MotionStep], antenna: usize) -> Vector3<f64> {
    let rows = 3 * steps.len();
    let mut a = DMatrix::<f64>::zeros(rows, 3);
    let mut y = DVector::<f64>::zeros(rows);
    for (k, step) in steps.iter().enumerate() {
        let d = step.imu_motion.rotation.to_matrix() - nalgebra::Matrix3::identity();
        let rhs = step.antenna_motions[antenna] - step.imu_motion.translation;
        a.view_mut((3 * k, 0), (3, 3)).copy_from(&d);
        y.rows_mut(3 * k, 3).copy_from(&rhs);
    }
    let sol = a.svd(true, true).solve(&y, 1e-12).unwrap();
    Vector3::new(sol[0], sol[1], sol[2])
}

#[test]
fn noiseless_recovery_is_exact_across_antenna_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checked = 0;
    for antennas in 1..=3 {
        for instance in 0..16 {
            let arms: Vec<_> = (0..antennas).map(|_| random_arm(&mut rng)).collect();
            let steps = hilly_dataset(arms.clone(), 120, 1000 + 16 * antennas as u64 + instance);
            let options = CalibrateOptions {
                use_regularization: antennas > 1,
                ..Default::default()
            };
            let result = calibrate(&steps, &[], &options).unwrap();
            assert!(
                matches!(result.certificate, Certificate::CertifiedGlobal),
                "antennas {antennas} instance {instance}: {:?}",
                result.certificate
            );
            for (estimate, truth) in result.lever_arms.iter().zip(&arms) {
                assert!(
                    (estimate - truth).norm() <= 1e-6,
                    "antennas {antennas} instance {instance}: estimate {estimate:?} truth {truth:?}"
                );
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 48);
}

#[test]
fn unconstrained_estimates_match_a_linear_least_squares_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for antennas in 1..=2 {
        for instance in 0..8u64 {
            let arms: Vec<_> = (0..antennas).map(|_| random_arm(&mut rng)).collect();
            let clean = simulate(&SimConfig::hilly(200, arms, 300 + instance)).unwrap();
            let noisy =
                add_noise(&clean, NoiseLevel::Relative(0.05), NoiseMode::Equal, 7 + instance)
                    .unwrap();
            let result = calibrate(&noisy.steps, &[], &CalibrateOptions::default()).unwrap();
            for antenna in 0..antennas {
                let oracle = linear_oracle(&noisy.steps, antenna);
                assert!(
                    (result.lever_arms[antenna] - oracle).norm() <= 1e-8,
                    "antenna {antenna}: {:?} vs oracle {oracle:?}",
                    result.lever_arms[antenna]
                );
            }
        }
    }
}

#[test]
fn weak_duality_and_feasibility_hold_on_noisy_constrained_solves() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for instance in 0..6u64 {
        let arm_a = random_arm(&mut rng);
        let arm_b = random_arm(&mut rng);
        let clean = simulate(&SimConfig::hilly(300, vec![arm_a, arm_b], 50 + instance)).unwrap();
        let noisy =
            add_noise(&clean, NoiseLevel::Relative(0.05), NoiseMode::Equal, 11 + instance).unwrap();
        let priors = [
            PriorConstraint::ArmLength { antenna: 0, length: arm_a.norm() },
            PriorConstraint::ComponentMagnitude {
                antenna: 1,
                axis: levercal_core::qcqp::Axis::Z,
                magnitude: arm_b.z.abs(),
            },
        ];
        let options = CalibrateOptions { use_regularization: true, ..Default::default() };
        let result = calibrate(&noisy.steps, &priors, &options).unwrap();
        let slack = 1e-9 * (1.0 + result.primal_cost.abs());
        assert!(
            result.dual_bound <= result.primal_cost + slack,
            "instance {instance}: dual {} exceeds primal {}",
            result.dual_bound,
            result.primal_cost
        );
        assert!(
            !matches!(result.certificate, Certificate::LocalOnly),
            "instance {instance}: gap {}",
            result.duality_gap
        );
        assert!((result.lever_arms[0].norm() - arm_a.norm()).abs() <= 1e-7);
        assert!((result.lever_arms[1].z.abs() - arm_b.z.abs()).abs() <= 1e-7);
        assert!((result.mu.abs() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn estimates_scale_linearly_with_the_scene() {
    let truth = Vector3::new(0.5, -0.3, 0.4);
    let clean = simulate(&SimConfig::hilly(250, vec![truth], 8)).unwrap();
    let noisy = add_noise(&clean, NoiseLevel::Relative(0.05), NoiseMode::Equal, 2).unwrap();
    let scale = 3.7;
    let scaled: Vec<MotionStep> = noisy
        .steps
        .iter()
        .map(|step| {
            let mut s = step.clone();
            s.imu_motion.translation *= scale;
            for b in &mut s.antenna_motions {
                *b *= scale;
            }
            s
        })
        .collect();
    let base = calibrate(&noisy.steps, &[], &CalibrateOptions::default()).unwrap();
    let big = calibrate(&scaled, &[], &CalibrateOptions::default()).unwrap();
    assert!(
        (big.lever_arms[0] - scale * base.lever_arms[0]).norm() <= 1e-8 * scale,
        "{:?} vs {:?}",
        big.lever_arms[0],
        base.lever_arms[0]
    );
}

#[test]
fn estimates_rotate_with_the_body_frame() {
    let truth = Vector3::new(0.5, -0.3, 0.4);
    let clean = simulate(&SimConfig::hilly(250, vec![truth], 8)).unwrap();
    let noisy = add_noise(&clean, NoiseLevel::Relative(0.05), NoiseMode::Equal, 2).unwrap();
    let s = Rotation::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0).normalize(), 0.8);
    let s_inv = s.inverse();
    let rotated: Vec<MotionStep> = noisy
        .steps
        .iter()
        .map(|step| {
            let r = &step.imu_motion.rotation;
            let mut out = step.clone();
            out.imu_motion.rotation = s_inv.compose(r).compose(&s);
            out.imu_motion.translation = s_inv.rotate(&step.imu_motion.translation);
            for b in &mut out.antenna_motions {
                *b = s_inv.rotate(b);
            }
            out
        })
        .collect();
    let base = calibrate(&noisy.steps, &[], &CalibrateOptions::default()).unwrap();
    let conj = calibrate(&rotated, &[], &CalibrateOptions::default()).unwrap();
    let expected = s_inv.rotate(&base.lever_arms[0]);
    assert!(
        (conj.lever_arms[0] - expected).norm() <= 1e-8,
        "{:?} vs {:?}",
        conj.lever_arms[0],
        expected
    );
}

#[test]
fn planar_mirror_ambiguity_is_reported_and_resolved() {
    let truth = Vector3::new(0.4, 0.25, 0.6);
    let flat = simulate(&SimConfig::flat(200, vec![truth], 31)).unwrap();
    let priors = [PriorConstraint::ArmLength { antenna: 0, length: truth.norm() }];

    let free = calibrate(&flat.steps, &priors, &CalibrateOptions::default()).unwrap();
    assert!((free.lever_arms[0].x - truth.x).abs() <= 1e-6);
    assert!((free.lever_arms[0].y - truth.y).abs() <= 1e-6);
    assert!((free.lever_arms[0].z.abs() - truth.z).abs() <= 1e-6);
    let alternate = free.alternate_cost.expect("mirror cost is reported when priors are present");
    assert!(
        (alternate - free.primal_cost).abs() <= 1e-9 * (1.0 + free.primal_cost.abs()),
        "mirror cost {alternate} vs {}",
        free.primal_cost
    );

    let pinned = calibrate(
        &flat.steps,
        &priors,
        &CalibrateOptions { sign_policy: SignPolicy::AboveImu, ..Default::default() },
    )
    .unwrap();
    assert!((pinned.lever_arms[0] - truth).norm() <= 1e-6);
    assert!(!matches!(pinned.certificate, Certificate::LocalOnly));
}

#[test]
fn noisy_planar_mirror_stays_no_better_than_the_estimate() {
    let truth = Vector3::new(0.4, 0.25, 0.6);
    let clean = simulate(&SimConfig::flat(400, vec![truth], 31)).unwrap();
    let noisy = add_noise(&clean, NoiseLevel::Relative(0.02), NoiseMode::Equal, 13).unwrap();
    let priors = [PriorConstraint::ArmLength { antenna: 0, length: truth.norm() }];
    let result = calibrate(&noisy.steps, &priors, &CalibrateOptions::default()).unwrap();
    let alternate = result.alternate_cost.unwrap();
    assert!(alternate >= result.primal_cost - 1e-9 * (1.0 + result.primal_cost.abs()));
}

#[test]
fn mixed_priors_cover_the_planar_deficit_per_antenna() {
    let arms = vec![Vector3::new(0.4, 0.1, 0.5), Vector3::new(-0.3, 0.2, 0.45)];
    let flat = simulate(&SimConfig::flat(250, arms.clone(), 17)).unwrap();

    let partial = [PriorConstraint::ArmLength { antenna: 0, length: arms[0].norm() }];
    let err = calibrate(&flat.steps, &partial, &CalibrateOptions::default()).unwrap_err();
    assert!(matches!(err, SolveError::PlanarNeedsPrior { antenna: 1 }));

    // With a prior on every antenna the planar dataset is admitted, but the
    // noiseless problem keeps one mirror symmetry per antenna, so the null
    // space is too large for analytic recovery and the certificate must not
    // overclaim. The priors themselves still hold at the returned point.
    let full = [
        PriorConstraint::ArmLength { antenna: 0, length: arms[0].norm() },
        PriorConstraint::ComponentMagnitude {
            antenna: 1,
            axis: levercal_core::qcqp::Axis::Z,
            magnitude: arms[1].z,
        },
    ];
    let options = CalibrateOptions { sign_policy: SignPolicy::AboveImu, ..Default::default() };
    let result = calibrate(&flat.steps, &full, &options).unwrap();
    assert!(result.null_space_dim > 2, "null dim {}", result.null_space_dim);
    assert!((result.lever_arms[0].norm() - arms[0].norm()).abs() <= 1e-7);
    assert!((result.lever_arms[1].z.abs() - arms[1].z).abs() <= 1e-7);
    assert!(!matches!(result.certificate, Certificate::CertifiedGlobal));
}

#[test]
fn noise_breaks_the_planar_multi_antenna_symmetry() {
    // The same two-antenna planar configuration with measurement noise has a
    // unique optimum: tilted noisy rotation axes leak just enough vertical
    // information to break the mirror ties, and the per-antenna priors pin
    // the vertical magnitudes.
    let arms = vec![Vector3::new(0.4, 0.1, 0.5), Vector3::new(-0.3, 0.2, 0.45)];
    let clean = simulate(&SimConfig::flat(400, arms.clone(), 17)).unwrap();
    let noisy = add_noise(&clean, NoiseLevel::Relative(0.05), NoiseMode::Equal, 21).unwrap();
    let full = [
        PriorConstraint::ArmLength { antenna: 0, length: arms[0].norm() },
        PriorConstraint::ArmLength { antenna: 1, length: arms[1].norm() },
    ];
    let options = CalibrateOptions {
        use_regularization: true,
        sign_policy: SignPolicy::AboveImu,
        ..Default::default()
    };
    let result = calibrate(&noisy.steps, &full, &options).unwrap();
    for (estimate, truth) in result.lever_arms.iter().zip(&arms) {
        assert!(
            (estimate - truth).norm() <= 0.25,
            "estimate {estimate:?} truth {truth:?}"
        );
    }
    for (estimate, truth) in result.lever_arms.iter().zip(&arms) {
        assert!((estimate.norm() - truth.norm()).abs() <= 1e-7);
    }
}

#[test]
fn external_trajectories_feed_the_same_pipeline() {
    let truth = Vector3::new(0.2, -0.4, 0.55);
    let synthetic = simulate(&SimConfig::hilly(150, vec![truth], 27)).unwrap();
    let config = SimConfig {
        path: PathKind::ExternalTrajectory(synthetic.poses.clone()),
        surface: Surface::Flat,
        step_count: 0,
        lever_arms: vec![truth],
        noise_level: NoiseLevel::Relative(0.0),
        noise_mode: NoiseMode::Equal,
        seed: 0,
    };
    let external = simulate(&config).unwrap();
    assert_eq!(external.steps.len(), synthetic.steps.len());
    let result = calibrate(&external.steps, &[], &CalibrateOptions::default()).unwrap();
    assert!((result.lever_arms[0] - truth).norm() <= 1e-7);
}

#[test]
fn straight_line_motion_is_rejected_as_degenerate() {
    let poses: Vec<_> = (0..40)
        .map(|k| {
            levercal_core::Transform::new(
                Rotation::identity(),
                Vector3::new(k as f64, 0.0, 0.0),
            )
        })
        .collect();
    let config = SimConfig {
        path: PathKind::ExternalTrajectory(poses),
        surface: Surface::Flat,
        step_count: 0,
        lever_arms: vec![Vector3::new(0.3, 0.2, 0.4)],
        noise_level: NoiseLevel::Relative(0.0),
        noise_mode: NoiseMode::Equal,
        seed: 0,
    };
    let dataset = simulate(&config).unwrap();
    let err = calibrate(&dataset.steps, &[], &CalibrateOptions::default()).unwrap_err();
    assert!(matches!(err, SolveError::DegenerateMotion));
}

#[test]
fn accumulated_cost_of_the_estimate_never_exceeds_the_truth_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for instance in 0..6u64 {
        let arm = random_arm(&mut rng);
        let clean = simulate(&SimConfig::hilly(200, vec![arm], 400 + instance)).unwrap();
        let noisy =
            add_noise(&clean, NoiseLevel::Relative(0.08), NoiseMode::Equal, instance).unwrap();
        let result = calibrate(&noisy.steps, &[], &CalibrateOptions::default()).unwrap();
        let problem = accumulate(&noisy.steps, false).unwrap();
        let mut z_true = DVector::zeros(4);
        z_true.rows_mut(0, 3).copy_from(&arm);
        z_true[3] = 1.0;
        assert!(
            result.primal_cost <= problem.cost(&z_true) + 1e-9,
            "instance {instance}: estimate cost {} vs truth cost {}",
            result.primal_cost,
            problem.cost(&z_true)
        );
    }
}
