//! Damped-least-squares inverse kinematics and joint-space reference
//! generation from Cartesian trajectories.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::dynamics::{self, EndEffectorPose, JointState, RobotModel};
use crate::so3;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct IkOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub damping: f64,
    pub max_step: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-12,
            damping: 1e-6,
            max_step: 0.3,
        }
    }
}

/// World-frame pose error `[p_t - p; log(R_t R^T)]`.
pub fn pose_error(target: &EndEffectorPose, current: &EndEffectorPose) -> DVector<f64> {
    let dp = target.position - current.position;
    let dr = so3::log(&(target.rotation * current.rotation.transpose()));
    DVector::from_iterator(6, dp.iter().chain(dr.iter()).copied())
}

/// Solves for joint angles reaching `target`, starting from `q0`.
pub fn solve_pose(
    model: &RobotModel,
    target: &EndEffectorPose,
    q0: &DVector<f64>,
    opts: &IkOptions,
) -> Result<DVector<f64>> {
    let mut q = q0.clone();
    let mut err_norm = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let pose = dynamics::forward_kinematics(model, &q)?;
        let e = pose_error(target, &pose);
        err_norm = e.norm();
        if err_norm < opts.tol {
            return Ok(q);
        }
        let j = dynamics::jacobian(model, &q)?;
        let mut dq = dls_solve(&j, &e, opts.damping);
        let step = dq.amax();
        if step > opts.max_step {
            dq *= opts.max_step / step;
        }
        q += dq;
    }
    // accept a slightly looser fit when damping stalls the last digits
    if err_norm < 1e-9 {
        Ok(q)
    } else {
        Err(Error::Validation(format!(
            "inverse kinematics did not converge (|e| = {err_norm:.3e})"
        )))
    }
}

/// `J^T (J J^T + lambda^2 I)^{-1} e`.
pub fn dls_solve(j: &DMatrix<f64>, e: &DVector<f64>, damping: f64) -> DVector<f64> {
    let jjt = j * j.transpose() + DMatrix::identity(j.nrows(), j.nrows()) * damping * damping;
    match jjt.clone().cholesky() {
        Some(ch) => j.transpose() * ch.solve(e),
        None => j.transpose() * jjt.svd(true, true).solve(e, 1e-14).unwrap_or_else(|_| e.clone() * 0.0),
    }
}

/// Joint-space trajectory sample consistent with a Cartesian reference.
#[derive(Clone, Debug)]
pub struct JointReference {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
}

/// Maps a Cartesian reference (pose, world twist `[v; w]`, world acceleration
/// `[a; w']`) to joint position, velocity and acceleration. `q_guess` seeds
/// the inverse kinematics (typically the previous sample).
pub fn joint_reference(
    model: &RobotModel,
    pose: &EndEffectorPose,
    twist: &DVector<f64>,
    accel: &DVector<f64>,
    q_guess: &DVector<f64>,
) -> Result<JointReference> {
    let q = solve_pose(model, pose, q_guess, &IkOptions::default())?;
    let j = dynamics::jacobian(model, &q)?;
    let svd = j.clone().svd(true, true);
    let qdot = svd
        .solve(twist, 1e-10)
        .map_err(|e| Error::Validation(e.to_string()))?;
    let jd = dynamics::jacobian_dot(model, &JointState::new(q.clone(), qdot.clone()))?;
    let qddot = svd
        .solve(&(accel - jd * &qdot), 1e-10)
        .map_err(|e| Error::Validation(e.to_string()))?;
    Ok(JointReference { q, qdot, qddot })
}

/// A nominal elbow-up seed for the built-in six-joint arm.
pub fn arm6_seed() -> DVector<f64> {
    DVector::from_vec(vec![0.0, 0.2, 1.2, 0.0, -1.4, 0.0])
}

pub fn twist(v: Vector3<f64>, w: Vector3<f64>) -> DVector<f64> {
    DVector::from_iterator(6, v.iter().chain(w.iter()).copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn board_orientation() -> Matrix3<f64> {
        Matrix3::from_columns(&[
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
        ])
    }

    #[test]
    fn reaches_the_board_sweep_without_singularities() {
        let model = RobotModel::arm6();
        let mut q = arm6_seed();
        for k in 0..=30 {
            let z = 0.6 + 0.01 * k as f64;
            let target = EndEffectorPose {
                rotation: board_orientation(),
                position: Vector3::new(0.6, 0.0, z),
            };
            q = solve_pose(&model, &target, &q, &IkOptions::default()).unwrap();
            let pose = dynamics::forward_kinematics(&model, &q).unwrap();
            assert!(pose_error(&target, &pose).norm() < 1e-9);
            let sv = dynamics::jacobian(&model, &q).unwrap().singular_values();
            assert!(sv.min() > 0.02, "near singular at z = {z}: {}", sv.min());
        }
    }

    #[test]
    fn joint_reference_reproduces_cartesian_motion() {
        let model = RobotModel::arm6();
        let pose = EndEffectorPose {
            rotation: board_orientation(),
            position: Vector3::new(0.6, 0.0, 0.7),
        };
        let tw = twist(Vector3::new(0.0, 0.0, 0.05), Vector3::zeros());
        let acc = twist(Vector3::new(0.0, 0.01, 0.0), Vector3::zeros());
        let r = joint_reference(&model, &pose, &tw, &acc, &arm6_seed()).unwrap();
        let j = dynamics::jacobian(&model, &r.q).unwrap();
        assert_relative_eq!(&j * &r.qdot, tw, epsilon = 1e-10);
        let jd = dynamics::jacobian_dot(&model, &JointState::new(r.q.clone(), r.qdot.clone())).unwrap();
        assert_relative_eq!(&j * &r.qddot + jd * &r.qdot, acc, epsilon = 1e-10);
    }
}
