//! Axis-angle helpers on SO(3).
//!
//! Rotations are carried as rotation vectors `ω = θ·axis`. The right Jacobian
//! `J_r(ω)` maps a parameter perturbation `dω` to the body-frame rotation
//! increment: `exp(ω + dω) ≈ exp(ω)·exp(J_r(ω)·dω)`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-8 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Inverse of [`exp`], accurate near the identity.
pub fn log(r: &Mat3) -> Vec3 {
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let s = w.norm();
    let c = (r.trace() - 1.0) * 0.5;
    let theta = s.atan2(c);
    if theta < 1e-8 {
        w
    } else if PI - theta > 1e-4 {
        w * (theta / s)
    } else {
        Rotation3::from_matrix_unchecked(*r).scaled_axis()
    }
}

/// Right Jacobian of the exponential map.
pub fn right_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() - k * a + k * k * b
}

/// Left Jacobian; `exp(ω + dω) ≈ exp(J_l(ω)·dω)·exp(ω)`.
pub fn left_jacobian(omega: &Vec3) -> Mat3 {
    right_jacobian(omega).transpose()
}

/// Canonical rotation vector: angle in `[0, π]`.
///
/// Angles are reduced modulo 2π; an angle above π is replaced by the
/// equivalent `2π − θ` about the negated axis.
pub fn canonicalize(omega: &Vec3) -> Vec3 {
    let theta = omega.norm();
    if theta <= PI || !theta.is_finite() {
        return *omega;
    }
    let axis = omega / theta;
    let reduced = theta.rem_euclid(2.0 * PI);
    if reduced > PI {
        -axis * (2.0 * PI - reduced)
    } else {
        axis * reduced
    }
}

/// Geodesic distance between two rotations, in radians.
pub fn angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) * 0.5;
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn exp_is_orthonormal() {
        let r = exp(&Vec3::new(0.3, -1.2, 2.0));
        assert_relative_eq!(r * r.transpose(), Mat3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn log_inverts_exp() {
        let w = Vec3::new(0.4, 0.1, -0.7);
        assert_relative_eq!(log(&exp(&w)), w, epsilon = 1e-12);
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let w = Vec3::new(0.5, -0.3, 0.9);
        let jr = right_jacobian(&w);
        let r = exp(&w);
        let h = 1e-6;
        for i in 0..3 {
            let mut d = Vec3::zeros();
            d[i] = h;
            let incr = log(&(r.transpose() * exp(&(w + d)))) / h;
            assert_relative_eq!(incr, jr.column(i).into_owned(), epsilon = 1e-6);
        }
    }

    #[test]
    fn small_angle_branch_agrees() {
        let w = Vec3::new(1e-5, 0.0, 0.0);
        let w2 = Vec3::new(1.0001e-4, 0.0, 0.0);
        assert_relative_eq!(exp(&w) * exp(&w2), exp(&(w + w2)), epsilon = 1e-12);
        // series branch against the closed form just across the threshold
        let t = Vec3::new(0.0, 0.99e-4, 0.0);
        let k = skew(&t);
        let th = t.norm();
        let closed = Mat3::identity() - k * ((1.0 - th.cos()) / (th * th)) + k * k * ((th - th.sin()) / th.powi(3));
        assert_relative_eq!(right_jacobian(&t), closed, epsilon = 1e-9);
    }

    #[test]
    fn log_near_pi() {
        let w = Vec3::new(0.0, PI - 1e-6, 0.0);
        assert_relative_eq!(log(&exp(&w)), w, epsilon = 1e-6);
        let tiny = Vec3::new(3e-9, -1e-9, 2e-9);
        assert_relative_eq!(log(&exp(&tiny)), tiny, epsilon = 1e-20);
    }

    #[test]
    fn canonicalize_wraps_large_angles() {
        let w = Vec3::new(0.0, 0.0, 1.5 * PI);
        let c = canonicalize(&w);
        assert_relative_eq!(c, Vec3::new(0.0, 0.0, -0.5 * PI), epsilon = 1e-12);
        assert_relative_eq!(exp(&c), exp(&w), epsilon = 1e-12);
        assert_eq!(canonicalize(&c), c);
    }
}
