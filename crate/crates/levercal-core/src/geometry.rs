//! Rigid-body transform algebra and small linear-algebra helpers.
//!
//! Rotations are stored as unit quaternions and converted to 3x3 matrices
//! where the calibration matrices need them. Translations are meters, angles
//! radians, throughout the crate.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

/// An element of SO(3), stored as a unit quaternion.
///
/// The stored quaternion is kept in canonical form (scalar part w >= 0, with
/// the first nonzero vector component positive when w = 0) so that equal
/// rotations compare and serialize identically.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    /// The identity rotation.
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion components, normalizing to unit
    /// length. Components are scalar-first: (w, x, y, z).
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::canonicalize(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    /// Builds a rotation from components already validated to be unit
    /// length, preserving their bits exactly (only the overall sign is
    /// canonicalized). Useful for parsers that must round-trip values.
    pub fn from_unit_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::canonicalize(UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)))
    }

    /// Builds a rotation of `angle` radians about `axis` (normalized here).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::canonicalize(UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(*axis),
            angle,
        ))
    }

    /// Extracts a rotation from a (near-)orthonormal matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self::canonicalize(UnitQuaternion::from_rotation_matrix(
            &Rotation3::from_matrix_unchecked(*m),
        ))
    }

    /// The 3x3 orthonormal matrix form.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Quaternion components (w, x, y, z) in canonical form.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Applies the rotation to a vector.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Composition: `self` followed-by-nothing convention, `(self ∘ other)(v)
    /// = self(other(v))`.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self::canonicalize(self.0 * other.0)
    }

    /// The inverse rotation.
    pub fn inverse(&self) -> Rotation {
        Self::canonicalize(self.0.inverse())
    }

    /// Rotation angle in [0, pi].
    pub fn angle(&self) -> f64 {
        self.0.angle()
    }

    /// Unit rotation axis and angle in [0, pi]. The axis defaults to +z for
    /// rotations too close to the identity to define one.
    pub fn axis_angle(&self) -> (Vector3<f64>, f64) {
        match self.0.axis() {
            Some(axis) => (axis.into_inner(), self.0.angle()),
            None => (Vector3::z(), 0.0),
        }
    }

    fn canonicalize(q: UnitQuaternion<f64>) -> Self {
        let c = q.quaternion();
        let flip = c.w < 0.0
            || (c.w == 0.0
                && (c.i < 0.0
                    || (c.i == 0.0 && (c.j < 0.0 || (c.j == 0.0 && c.k < 0.0)))));
        if flip {
            Rotation(UnitQuaternion::new_unchecked(-c))
        } else {
            Rotation(q)
        }
    }
}

/// A rigid transform in SE(3): rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub rotation: Rotation,
    /// Meters.
    pub translation: Vector3<f64>,
}

impl Transform {
    /// The identity transform.
    pub fn identity() -> Self {
        Transform { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Transform { rotation, translation }
    }

    /// Homogeneous-matrix product: R = R_a R_b, t = R_a t_b + t_a.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    /// The inverse transform (R^T, -R^T t).
    pub fn inverse(&self) -> Transform {
        let inv_rot = self.rotation.inverse();
        Transform {
            rotation: inv_rot,
            translation: -inv_rot.rotate(&self.translation),
        }
    }

    /// Applies the transform to a point: R p + t.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

/// The motion that carries `pose_k` onto `pose_k1`, expressed in the frame of
/// `pose_k`: pose_k^-1 ∘ pose_k1. Both poses must share one world frame.
pub fn relative_motion(pose_k: &Transform, pose_k1: &Transform) -> Transform {
    pose_k.inverse().compose(pose_k1)
}

/// Standard Kronecker product; shape (r_a r_b) x (c_a c_b).
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Canonical basis column vector e_i of the given dimension.
pub fn basis_vector(dim: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(dim);
    v[i] = 1.0;
    v
}

/// Canonical basis outer product e_r e_c^T as a rows x cols matrix with a
/// single 1 at (r, c).
pub fn basis_outer(rows: usize, cols: usize, r: usize, c: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    m[(r, c)] = 1.0;
    m
}
