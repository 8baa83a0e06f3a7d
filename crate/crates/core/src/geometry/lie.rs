//! Exponential and logarithm maps of SO(3)/SE(3) and their Jacobians.
//!
//! Tangent ordering is `[rho, phi]` (translation, rotation). Jacobians follow
//! the left/right conventions of Barfoot, "State Estimation for Robotics".

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3};

use super::{Pose, Twist};
use crate::error::{Error, Result};

/// Below this angle the closed-form coefficients switch to Taylor series.
const SERIES_ANGLE: f64 = 1e-4;
/// Jacobian coefficients involving higher powers lose precision sooner.
const SERIES_ANGLE_JAC: f64 = 1e-2;
/// Rotations closer to pi than this are rejected by the log maps.
pub const NEAR_PI_MARGIN: f64 = 1e-6;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z))
}

/// Rotation vector of `q`. Fails when the angle is within 1e-6 of pi.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Result<Vector3<f64>> {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let n = v.norm();
    let theta = 2.0 * n.atan2(w);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(Error::NearPiRotation { angle: theta });
    }
    if n == 0.0 {
        return Ok(Vector3::zeros());
    }
    Ok(v * (theta / n))
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (a, b) = if theta < SERIES_ANGLE_JAC {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let h = hat(phi);
    Matrix3::identity() + a * h + b * h * h
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    let h = hat(phi);
    Matrix3::identity() - 0.5 * h + c * h * h
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose {
        rotation: so3_exp(&xi.phi),
        translation: so3_left_jacobian(&xi.phi) * xi.rho,
    }
}

pub fn se3_log(p: &Pose) -> Result<Twist> {
    let phi = so3_log(&p.rotation)?;
    Ok(Twist {
        rho: so3_left_jacobian_inv(&phi) * p.translation,
        phi,
    })
}

/// Off-diagonal block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < SERIES_ANGLE_JAC {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = t2 * t2;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    0.5 * r + c1 * (pr + rp + prp) + c2 * (pp * r + rp * p - 3.0 * prp) + c3 * (prp * p + p * prp)
}

/// Left Jacobian of SE(3): `exp(xi + d) ≈ exp(J_l d) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let jl = so3_left_jacobian(&xi.phi);
    let q = se3_q(&xi.rho, &xi.phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    m
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jl_inv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q(&xi.rho, &xi.phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jl_inv * q * jl_inv));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    m
}

/// Inverse right Jacobian: `log(exp(xi) exp(d)) ≈ xi + J_r^{-1}(xi) d`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist {
        rho: -xi.rho,
        phi: -xi.phi,
    })
}

/// Adjoint of `p` acting on `[rho, phi]`: `p exp(d) p^-1 = exp(Ad_p d)`.
pub fn adjoint(p: &Pose) -> Matrix6<f64> {
    let r = p.rotation_matrix();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&p.translation) * r));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m
}
