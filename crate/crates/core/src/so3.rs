//! Rotation-group helpers shared by the kinematics, controller and learning code.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Tolerance used to accept a matrix as a rotation.
pub const ROTATION_TOL: f64 = 1e-9;

/// Skew-symmetric matrix such that `skew(x) * y == x.cross(y)`.
pub fn skew(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -x.z, x.y, x.z, 0.0, -x.x, -x.y, x.x, 0.0)
}

/// Inverse of [`skew`]. Rejects matrices that are not antisymmetric within 1e-9.
pub fn vee(s: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let asym = (s + s.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(Error::Validation(format!(
            "vee expects an antisymmetric matrix, |S + S^T| = {asym:.3e}"
        )));
    }
    Ok(vee_unchecked(s))
}

/// Vee of the antisymmetric part, without validation.
pub(crate) fn vee_unchecked(s: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (s[(2, 1)] - s[(1, 2)]),
        0.5 * (s[(0, 2)] - s[(2, 0)]),
        0.5 * (s[(1, 0)] - s[(0, 1)]),
    )
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    ortho <= tol && (r.determinant() - 1.0).abs() <= tol
}

pub fn validate_rotation(r: &Matrix3<f64>, what: &str) -> Result<()> {
    if r.iter().all(|v| v.is_finite()) && is_rotation(r, ROTATION_TOL) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} is not a rotation matrix")))
    }
}

/// Rodrigues' formula.
pub fn exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-16 {
        // second-order series keeps orthogonality to machine precision here
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

/// Matrix logarithm returning exponential coordinates `w` with `|w| <= pi`.
///
/// At exactly `pi` the axis is taken from the largest diagonal entry of
/// `(R + I) / 2`; the sign of the returned vector is then arbitrary.
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = vee_unchecked(r); // = sin(theta) * axis
    if theta < 1e-8 {
        return w;
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return w * (theta / theta.sin());
    }
    // Near pi: sin(theta) is tiny, recover the axis from the symmetric part.
    let b = (r + Matrix3::identity()) * 0.5;
    let i = (0..3)
        .max_by(|&a, &c| b[(a, a)].partial_cmp(&b[(c, c)]).unwrap())
        .unwrap();
    let mut axis = b.column(i).into_owned();
    axis /= axis.norm();
    // keep the sign consistent with the antisymmetric part when it is informative
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    exp(&Vector3::new(a, 0.0, 0.0))
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    exp(&Vector3::new(0.0, a, 0.0))
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    exp(&Vector3::new(0.0, 0.0, a))
}

/// Roll-pitch-yaw (fixed X, then Y, then Z) to a rotation matrix.
pub fn from_rpy(rpy: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(rpy.z) * rot_y(rpy.y) * rot_x(rpy.x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn skew_is_cross_product() {
        let s = skew(&Vector3::x());
        assert_relative_eq!(s * Vector3::y(), Vector3::z());
        let x = Vector3::new(0.3, -1.2, 2.0);
        assert_relative_eq!(skew(&x) * x, Vector3::zeros());
        assert_relative_eq!(vee(&skew(&x)).unwrap(), x);
    }

    #[test]
    fn vee_rejects_symmetric_input() {
        assert!(vee(&Matrix3::identity()).is_err());
    }

    #[test]
    fn log_of_known_rotations() {
        assert_relative_eq!(log(&Matrix3::identity()), Vector3::zeros());
        assert_relative_eq!(log(&rot_z(1.0)), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        let w = log(&rot_x(std::f64::consts::PI));
        assert_relative_eq!(w.norm(), std::f64::consts::PI, epsilon = 1e-9);
        assert_relative_eq!(exp(&w), rot_x(std::f64::consts::PI), epsilon = 1e-9);
    }
}
