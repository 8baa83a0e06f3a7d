//! SE(3) pose algebra, tangent-space maps and rigid trajectory alignment.
//!
//! Poses use Hamilton unit quaternions stored as (w, x, y, z) and are
//! renormalized after every composition. Tangent vectors are ordered
//! translation first: `[rho, phi]`.

mod align;
pub mod lie;

pub use align::{apply_alignment, umeyama_align};
pub use lie::{adjoint, se3_exp, se3_log, se3_right_jacobian_inv, so3_exp, so3_log};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// Minimal 6-vector parameterization of a pose difference.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    /// Translational part (meters).
    pub rho: Vector3<f64>,
    /// Rotational part (radians).
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Build from a raw (w, x, y, z) quaternion; the quaternion is normalized.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    /// Planar pose: position (x, y, 0) with heading `yaw` about +z.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        }
    }

    /// Quaternion as (w, x, y, z).
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let q = self.rotation.quaternion() * other.rotation.quaternion();
        Pose {
            rotation: UnitQuaternion::new_normalize(q),
            translation: self.translation + self.rotation * other.translation,
        }
    }

    /// `inverse(self) ∘ other`: the motion taking `self` to `other`.
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Geodesic rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Right-perturbation retraction `self ∘ exp(delta)`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        self.compose(&se3_exp(delta))
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn relative(a: &Pose, b: &Pose) -> Pose {
    a.relative(b)
}

/// Euclidean distance between pose positions, in meters.
pub fn translation_distance(a: &Pose, b: &Pose) -> f64 {
    (a.translation - b.translation).norm()
}

/// Angle between the rotations of two quaternions (sign-invariant).
pub fn quaternion_distance(a: &Pose, b: &Pose) -> f64 {
    a.rotation.angle_to(&b.rotation)
}
