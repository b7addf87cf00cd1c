//! Kinematics and rigid-body dynamics of fixed-base revolute open chains.
//!
//! All quantities are computed in the world frame. The mass matrix comes from
//! the composite-rigid-body recursion and inverse dynamics from recursive
//! Newton-Euler; the two are independent paths and are cross-checked in the
//! tests.
//!
//! Joint equation of motion: `M(q) q'' + c(q, q') + g(q) = tau + J(q)^T f`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::check_len;
use crate::so3;
use crate::{Error, Result};

/// Rigid transform from a parent frame to a child frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }
}

/// A revolute joint. `offset` places the joint frame in the previous link frame
/// (the base for the first joint); `axis` is expressed in the joint frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub offset: Transform,
    pub axis: Vector3<f64>,
}

/// Inertial data of the link driven by the joint with the same index, in the
/// link frame. `inertia` is taken about the center of mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    joints: Vec<Joint>,
    links: Vec<Link>,
    gravity: Vector3<f64>,
    tool: Transform,
}

impl RobotModel {
    pub fn new(
        joints: Vec<Joint>,
        links: Vec<Link>,
        gravity: Vector3<f64>,
        tool: Transform,
    ) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidModel("at least one joint is required".into()));
        }
        if joints.len() != links.len() {
            return Err(Error::InvalidModel(format!(
                "{} joints but {} links",
                joints.len(),
                links.len()
            )));
        }
        for (i, j) in joints.iter().enumerate() {
            if ((j.axis.norm() - 1.0).abs()) > 1e-12 {
                return Err(Error::InvalidModel(format!("joint {i}: axis is not unit length")));
            }
            if !so3::is_rotation(&j.offset.rotation, 1e-9) {
                return Err(Error::InvalidModel(format!(
                    "joint {i}: offset rotation is not orthonormal"
                )));
            }
        }
        for (i, l) in links.iter().enumerate() {
            if !(l.mass > 0.0) || !l.mass.is_finite() {
                return Err(Error::InvalidModel(format!("link {i}: mass must be positive")));
            }
            if (l.inertia - l.inertia.transpose()).abs().max() > 1e-12 {
                return Err(Error::InvalidModel(format!("link {i}: inertia is not symmetric")));
            }
            if l.inertia.cholesky().is_none() {
                return Err(Error::InvalidModel(format!(
                    "link {i}: inertia is not positive definite"
                )));
            }
        }
        if !gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::InvalidModel("gravity must be finite".into()));
        }
        Ok(Self {
            joints,
            links,
            gravity,
            tool,
        })
    }

    /// Number of joints.
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn gravity(&self) -> &Vector3<f64> {
        &self.gravity
    }

    pub fn tool(&self) -> &Transform {
        &self.tool
    }

    pub fn with_gravity(mut self, gravity: Vector3<f64>) -> Self {
        self.gravity = gravity;
        self
    }

    /// Two-link planar arm in the x-y plane with unit link lengths and masses,
    /// centers of mass at mid-link and gravity along -y.
    pub fn planar_2r() -> Self {
        let rod = Link {
            mass: 1.0,
            com: Vector3::new(0.5, 0.0, 0.0),
            inertia: Matrix3::from_diagonal(&Vector3::new(1e-3, 1.0 / 12.0, 1.0 / 12.0)),
        };
        Self::new(
            vec![
                Joint {
                    offset: Transform::identity(),
                    axis: Vector3::z(),
                },
                Joint {
                    offset: Transform::translation(1.0, 0.0, 0.0),
                    axis: Vector3::z(),
                },
            ],
            vec![rod.clone(), rod],
            Vector3::new(0.0, -9.81, 0.0),
            Transform::translation(1.0, 0.0, 0.0),
        )
        .expect("built-in model is valid")
    }

    /// Six-joint arm with xArm-6-like proportions, sized to reach the board
    /// sweep used by the bundled scenarios. The inertial values are
    /// plausible placeholders, not manufacturer data.
    ///
    /// The tool frame's z axis is the probe axis; at the zero configuration it
    /// points along world +x.
    pub fn arm6() -> Self {
        let link = |m: f64, c: [f64; 3], i: [f64; 3]| Link {
            mass: m,
            com: Vector3::from(c),
            inertia: Matrix3::from_diagonal(&Vector3::from(i)),
        };
        let joint = |t: [f64; 3], axis: Vector3<f64>| Joint {
            offset: Transform::translation(t[0], t[1], t[2]),
            axis,
        };
        Self::new(
            vec![
                joint([0.0, 0.0, 0.267], Vector3::z()),
                joint([0.0, 0.0, 0.0], Vector3::y()),
                joint([0.0, 0.0, 0.45], Vector3::y()),
                joint([0.1, 0.0, 0.0], Vector3::x()),
                joint([0.3, 0.0, 0.0], Vector3::y()),
                joint([0.076, 0.0, 0.0], Vector3::z()),
            ],
            vec![
                link(2.2, [0.0, 0.0, -0.03], [0.006, 0.006, 0.004]),
                link(2.5, [0.0, 0.0, 0.22], [0.045, 0.045, 0.004]),
                link(1.8, [0.05, 0.0, 0.0], [0.003, 0.004, 0.004]),
                link(1.5, [0.15, 0.0, 0.0], [0.002, 0.012, 0.012]),
                link(0.8, [0.04, 0.0, 0.0], [0.001, 0.0012, 0.0012]),
                link(0.6, [0.07, 0.0, 0.0], [0.0012, 0.0015, 0.0015]),
            ],
            Vector3::new(0.0, 0.0, -9.81),
            Transform {
                rotation: so3::rot_y(std::f64::consts::FRAC_PI_2),
                translation: Vector3::new(0.1, 0.0, 0.0),
            },
        )
        .expect("built-in model is valid")
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        check_len("joint vector", self.dof(), q.len())?;
        if q.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation("joint vector has non-finite entries".into()))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>) -> Self {
        Self { q, qdot }
    }

    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        Self {
            q,
            qdot: DVector::zeros(n),
        }
    }

    fn check(&self, model: &RobotModel) -> Result<()> {
        model.check_q(&self.q)?;
        check_len("joint velocity", model.dof(), self.qdot.len())?;
        if self.qdot.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Validation("joint velocity has non-finite entries".into()))
        }
    }
}

/// End-effector frame in the world: `rotation` maps end-effector coordinates
/// to world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct EndEffectorPose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

/// World-frame placement of every link frame along the chain.
pub(crate) struct ChainFrames {
    pub rot: Vec<Matrix3<f64>>,
    pub origin: Vec<Vector3<f64>>,
    pub axis: Vec<Vector3<f64>>,
    pub ee: EndEffectorPose,
}

pub(crate) fn chain_frames(model: &RobotModel, q: &DVector<f64>) -> ChainFrames {
    let n = model.dof();
    let mut rot = Vec::with_capacity(n);
    let mut origin = Vec::with_capacity(n);
    let mut axis = Vec::with_capacity(n);
    let mut r_prev = Matrix3::identity();
    let mut o_prev = Vector3::zeros();
    for (i, joint) in model.joints.iter().enumerate() {
        let r_joint = r_prev * joint.offset.rotation;
        let o = o_prev + r_prev * joint.offset.translation;
        let z = r_joint * joint.axis;
        let r = r_joint * so3::exp(&(joint.axis * q[i]));
        rot.push(r);
        origin.push(o);
        axis.push(z);
        r_prev = r;
        o_prev = o;
    }
    let ee = EndEffectorPose {
        rotation: r_prev * model.tool.rotation,
        position: o_prev + r_prev * model.tool.translation,
    };
    ChainFrames {
        rot,
        origin,
        axis,
        ee,
    }
}

pub fn forward_kinematics(model: &RobotModel, q: &DVector<f64>) -> Result<EndEffectorPose> {
    model.check_q(q)?;
    Ok(chain_frames(model, q).ee)
}

/// Recursive Newton-Euler with an explicit gravity vector.
pub(crate) fn rnea_with_gravity(
    model: &RobotModel,
    frames: &ChainFrames,
    qd: &DVector<f64>,
    qdd: &DVector<f64>,
    gravity: &Vector3<f64>,
) -> DVector<f64> {
    let n = model.dof();
    let mut w = Vector3::zeros();
    let mut wd = Vector3::zeros();
    // base acceleration -g accounts for gravity on every link
    let mut a = -gravity;
    let mut o_prev = Vector3::zeros();

    let mut force = Vec::with_capacity(n);
    let mut moment = Vec::with_capacity(n);
    let mut com_w = Vec::with_capacity(n);

    for i in 0..n {
        let o = frames.origin[i];
        let d = o - o_prev;
        // joint origin is rigidly attached to the previous link
        a += wd.cross(&d) + w.cross(&w.cross(&d));
        let z = frames.axis[i];
        let w_new = w + z * qd[i];
        wd = wd + z * qdd[i] + w_new.cross(&(z * qd[i]));
        w = w_new;

        let link = &model.links[i];
        let r = frames.rot[i];
        let rc = r * link.com;
        let ac = a + wd.cross(&rc) + w.cross(&w.cross(&rc));
        let inertia = r * link.inertia * r.transpose();
        force.push(link.mass * ac);
        moment.push(inertia * wd + w.cross(&(inertia * w)));
        com_w.push(rc);
        o_prev = o;
    }

    let mut tau = DVector::zeros(n);
    let mut f_next = Vector3::zeros();
    let mut n_next = Vector3::zeros();
    for i in (0..n).rev() {
        let lever_next = if i + 1 < n {
            frames.origin[i + 1] - frames.origin[i]
        } else {
            Vector3::zeros()
        };
        let f = force[i] + f_next;
        let m = moment[i] + com_w[i].cross(&force[i]) + n_next + lever_next.cross(&f_next);
        tau[i] = frames.axis[i].dot(&m);
        f_next = f;
        n_next = m;
    }
    tau
}

/// Joint torques realising `qddot` at `(q, qdot)` with no external wrench.
pub fn inverse_dynamics(
    model: &RobotModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_q(q)?;
    check_len("joint velocity", model.dof(), qdot.len())?;
    check_len("joint acceleration", model.dof(), qddot.len())?;
    let frames = chain_frames(model, q);
    Ok(rnea_with_gravity(model, &frames, qdot, qddot, &model.gravity))
}

pub fn gravity_vector(model: &RobotModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_q(q)?;
    let n = model.dof();
    let frames = chain_frames(model, q);
    let zero = DVector::zeros(n);
    Ok(rnea_with_gravity(model, &frames, &zero, &zero, &model.gravity))
}

/// Coriolis and centrifugal torques, gravity excluded.
pub fn bias_forces(model: &RobotModel, state: &JointState) -> Result<DVector<f64>> {
    state.check(model)?;
    let frames = chain_frames(model, &state.q);
    Ok(coriolis(model, &frames, &state.qdot))
}

fn coriolis(model: &RobotModel, frames: &ChainFrames, qd: &DVector<f64>) -> DVector<f64> {
    let zero = DVector::zeros(model.dof());
    rnea_with_gravity(model, frames, qd, &zero, &Vector3::zeros())
}

/// Joint-space mass matrix by the composite-rigid-body algorithm.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    Ok(crba(model, &chain_frames(model, q)))
}

fn crba(model: &RobotModel, frames: &ChainFrames) -> DMatrix<f64> {
    let n = model.dof();
    let mut m = DMatrix::zeros(n, n);

    // composite body of links j..n-1: mass, center of mass, inertia about that center
    let mut mass_c = 0.0;
    let mut com_c = Vector3::zeros();
    let mut inertia_c = Matrix3::zeros();
    for j in (0..n).rev() {
        let link = &model.links[j];
        let r = frames.rot[j];
        let c_link = frames.origin[j] + r * link.com;
        let i_link = r * link.inertia * r.transpose();

        let mass_new = mass_c + link.mass;
        let com_new = (com_c * mass_c + c_link * link.mass) / mass_new;
        inertia_c = shift_inertia(&inertia_c, mass_c, &(com_c - com_new))
            + shift_inertia(&i_link, link.mass, &(c_link - com_new));
        mass_c = mass_new;
        com_c = com_new;

        // wrench needed to give the composite body unit acceleration about joint j
        let zj = frames.axis[j];
        let oj = frames.origin[j];
        let f = mass_c * zj.cross(&(com_c - oj));
        let n_oj = inertia_c * zj + (com_c - oj).cross(&f);
        for i in 0..=j {
            let lever = oj - frames.origin[i];
            let v = frames.axis[i].dot(&(n_oj + lever.cross(&f)));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn shift_inertia(i_com: &Matrix3<f64>, mass: f64, r: &Vector3<f64>) -> Matrix3<f64> {
    i_com + mass * (Matrix3::identity() * r.norm_squared() - r * r.transpose())
}

/// Geometric Jacobian of the end-effector frame, rows `[linear; angular]`,
/// both in the world frame. The linear part is the velocity of the
/// end-effector origin.
pub fn jacobian(model: &RobotModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    Ok(jacobian_from_frames(&chain_frames(model, q)))
}

pub(crate) fn jacobian_from_frames(frames: &ChainFrames) -> DMatrix<f64> {
    let n = frames.axis.len();
    let p = frames.ee.position;
    let mut j = DMatrix::zeros(6, n);
    for i in 0..n {
        let z = frames.axis[i];
        let lin = z.cross(&(p - frames.origin[i]));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
    }
    j
}

/// Time derivative of [`jacobian`] along the current joint velocity.
pub fn jacobian_dot(model: &RobotModel, state: &JointState) -> Result<DMatrix<f64>> {
    state.check(model)?;
    let frames = chain_frames(model, &state.q);
    Ok(jacobian_dot_from_frames(&frames, &state.qdot))
}

pub(crate) fn jacobian_dot_from_frames(frames: &ChainFrames, qd: &DVector<f64>) -> DMatrix<f64> {
    let n = frames.axis.len();
    let p = frames.ee.position;
    // end-effector linear velocity
    let mut v_e = Vector3::zeros();
    for i in 0..n {
        v_e += frames.axis[i].cross(&(p - frames.origin[i])) * qd[i];
    }
    let mut jd = DMatrix::zeros(6, n);
    let mut w = Vector3::zeros();
    let mut v_o = Vector3::zeros();
    let mut o_prev = Vector3::zeros();
    for i in 0..n {
        let o = frames.origin[i];
        // origin i is fixed in link i-1
        v_o += w.cross(&(o - o_prev));
        let z = frames.axis[i];
        w += z * qd[i];
        let z_dot = w.cross(&z);
        let lin = z_dot.cross(&(p - o)) + z.cross(&(v_e - v_o));
        jd.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
        jd.fixed_view_mut::<3, 1>(3, i).copy_from(&z_dot);
        o_prev = o;
    }
    jd
}

/// Gravitational potential energy, zero at the base origin.
pub fn potential_energy(model: &RobotModel, q: &DVector<f64>) -> Result<f64> {
    model.check_q(q)?;
    let frames = chain_frames(model, q);
    Ok(model
        .links
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let c = frames.origin[i] + frames.rot[i] * l.com;
            -l.mass * model.gravity.dot(&c)
        })
        .sum())
}

pub fn kinetic_energy(model: &RobotModel, state: &JointState) -> Result<f64> {
    let m = mass_matrix(model, &state.q)?;
    check_len("joint velocity", model.dof(), state.qdot.len())?;
    Ok(0.5 * state.qdot.dot(&(m * &state.qdot)))
}

/// Everything the controller needs about the robot at one state, evaluated
/// from a single kinematic pass.
#[derive(Clone, Debug)]
pub struct ModelTerms {
    pub pose: EndEffectorPose,
    pub jacobian: DMatrix<f64>,
    pub jacobian_dot: DMatrix<f64>,
    pub mass: DMatrix<f64>,
    pub coriolis: DVector<f64>,
    pub gravity: DVector<f64>,
    /// World-frame end-effector twist `[v; omega]`.
    pub twist: DVector<f64>,
}

impl ModelTerms {
    pub fn compute(model: &RobotModel, state: &JointState) -> Result<Self> {
        state.check(model)?;
        let n = model.dof();
        let frames = chain_frames(model, &state.q);
        let jac = jacobian_from_frames(&frames);
        let jd = jacobian_dot_from_frames(&frames, &state.qdot);
        let zero = DVector::zeros(n);
        let gravity = rnea_with_gravity(model, &frames, &zero, &zero, &model.gravity);
        let coriolis = coriolis(model, &frames, &state.qdot);
        let mass = crba(model, &frames);
        let twist = &jac * &state.qdot;
        Ok(Self {
            pose: frames.ee,
            jacobian: jac,
            jacobian_dot: jd,
            mass,
            coriolis,
            gravity,
            twist,
        })
    }

    pub fn linear_velocity(&self) -> Vector3<f64> {
        Vector3::new(self.twist[0], self.twist[1], self.twist[2])
    }

    pub fn angular_velocity(&self) -> Vector3<f64> {
        Vector3::new(self.twist[3], self.twist[4], self.twist[5])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn planar_fk_straight_and_quarter_turn() {
        let m = RobotModel::planar_2r();
        let p = forward_kinematics(&m, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(p.position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(p.rotation, Matrix3::identity(), epsilon = 1e-12);
        let p = forward_kinematics(&m, &DVector::from_vec(vec![FRAC_PI_2, 0.0])).unwrap();
        assert_relative_eq!(p.position, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = RobotModel::planar_2r();
        let err = forward_kinematics(&m, &DVector::zeros(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, got: 3, .. }));
    }

    #[test]
    fn pendulum_mass_matrix_is_ml2() {
        let m = RobotModel::new(
            vec![Joint {
                offset: Transform::identity(),
                axis: Vector3::z(),
            }],
            vec![Link {
                mass: 2.0,
                com: Vector3::new(0.7, 0.0, 0.0),
                // near-point mass: tiny but positive definite inertia
                inertia: Matrix3::identity() * 1e-12,
            }],
            Vector3::zeros(),
            Transform::identity(),
        )
        .unwrap();
        let mm = mass_matrix(&m, &DVector::from_vec(vec![0.4])).unwrap();
        assert_relative_eq!(mm[(0, 0)], 2.0 * 0.49, epsilon = 1e-11);
    }

    #[test]
    fn pendulum_gravity_torque() {
        let m = RobotModel::new(
            vec![Joint {
                offset: Transform::identity(),
                axis: Vector3::z(),
            }],
            vec![Link {
                mass: 1.5,
                com: Vector3::new(0.4, 0.0, 0.0),
                inertia: Matrix3::identity() * 0.01,
            }],
            Vector3::new(0.0, -9.81, 0.0),
            Transform::identity(),
        )
        .unwrap();
        let g = gravity_vector(&m, &DVector::from_vec(vec![0.0])).unwrap();
        assert_relative_eq!(g[0], 1.5 * 9.81 * 0.4, epsilon = 1e-12);
        let g = gravity_vector(&m, &DVector::from_vec(vec![0.3])).unwrap();
        assert_relative_eq!(g[0], 1.5 * 9.81 * 0.4 * 0.3f64.cos(), epsilon = 1e-12);
    }

    #[test]
    fn zero_gravity_field_gives_zero_vector() {
        let m = RobotModel::arm6().with_gravity(Vector3::zeros());
        let q = DVector::from_vec(vec![0.1, -0.3, 0.7, 0.2, -0.5, 0.9]);
        assert_relative_eq!(gravity_vector(&m, &q).unwrap().norm(), 0.0);
    }

    #[test]
    fn planar_jacobian_lever_arm_and_parallel_axes() {
        let m = RobotModel::planar_2r();
        let j = jacobian(&m, &DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(j[(0, 0)], 0.0);
        assert_relative_eq!(j[(1, 0)], 2.0);
        assert_relative_eq!(j[(2, 0)], 0.0);
        for c in 0..2 {
            assert_relative_eq!(j.fixed_view::<3, 1>(3, c).into_owned(), Vector3::z());
        }
    }

    #[test]
    fn jacobian_dot_vanishes_at_rest() {
        let m = RobotModel::arm6();
        let s = JointState::at_rest(DVector::from_vec(vec![0.1, -0.3, 0.7, 0.2, -0.5, 0.9]));
        assert_eq!(jacobian_dot(&m, &s).unwrap().norm(), 0.0);
    }

    #[test]
    fn model_rejects_bad_inputs() {
        let good = RobotModel::planar_2r();
        let mut joints = good.joints().to_vec();
        joints[0].axis = Vector3::new(0.0, 0.0, 2.0);
        assert!(RobotModel::new(joints, good.links().to_vec(), *good.gravity(), Transform::identity()).is_err());
        let mut links = good.links().to_vec();
        links[1].mass = 0.0;
        assert!(RobotModel::new(good.joints().to_vec(), links, *good.gravity(), Transform::identity()).is_err());
        let mut links = good.links().to_vec();
        links[0].inertia[(0, 1)] = 0.5;
        assert!(RobotModel::new(good.joints().to_vec(), links, *good.gravity(), Transform::identity()).is_err());
    }
}
