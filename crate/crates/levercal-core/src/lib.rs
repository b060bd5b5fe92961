//! Certifiably optimal GNSS/IMU lever-arm calibration from motion data.
//!
//! This crate estimates the 3D offset (lever arm) between an IMU and one or
//! more GNSS antennas rigidly mounted on the same platform, using only the
//! motion each sensor reports about itself. No mechanical survey, no marker
//! board, no initial guess.
//!
//! The estimation problem is a quadratically constrained quadratic program.
//! Solving its Lagrangian dual yields a lower bound on the achievable cost;
//! when the recovered solution meets that bound the result is certified as
//! the global optimum rather than merely a local one.
//!
//! Module overview:
//!
//! * [`geometry`] — rotations, rigid transforms, and the relative motions
//!   that pairs of poses induce.
//! * [`qcqp`] — builds the quadratic cost and constraint matrices from
//!   per-sensor motion measurements and assesses whether a dataset excites
//!   enough rotation to make the lever arms observable.
//! * [`solver`] — dual solve, primal recovery, local refinement, and the
//!   optimality certificate.
//! * [`sim`] — a deterministic motion simulator for ground-truth
//!   experiments: surface-following paths, antenna motion synthesis, and
//!   sensor noise injection.
//!
//! The crate is `no_std`-compatible (with `alloc`) when built with the
//! `libm` feature instead of the default `std` feature.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("levercal-core requires either the `std` or the `libm` feature");

extern crate alloc;

pub mod geometry;
pub mod qcqp;
pub mod sim;
pub mod solver;

pub use geometry::{Rotation, Transform};
pub use qcqp::{MotionAssessment, MotionStep, MotionVerdict, PriorConstraint, QcqpProblem};
pub use solver::{calibrate, CalibrateOptions, CalibrationResult, Certificate};
