//! Oracles shared by the integration tests. Nothing here calls into the
//! library's algorithms; kinematics and QP optima are recomputed from scratch.
#![allow(dead_code)]

use std::path::PathBuf;

use hybridctl::dynamics::RobotModel;
use hybridctl::qp::QpProblem;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Rotation3, Unit, Vector3};
use rand::Rng;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn homogeneous(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

fn rot_of(m: &Matrix4<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

fn pos_of(m: &Matrix4<f64>) -> Vector3<f64> {
    m.fixed_view::<3, 1>(0, 3).into_owned()
}

/// World placement of each link after its joint rotation, plus the joint
/// axes in world coordinates and the tool frame.
pub struct Frames {
    pub links: Vec<Matrix4<f64>>,
    pub axes: Vec<Vector3<f64>>,
    pub tool: Matrix4<f64>,
}

pub fn frames(model: &RobotModel, q: &DVector<f64>) -> Frames {
    let mut t = Matrix4::identity();
    let mut links = Vec::new();
    let mut axes = Vec::new();
    for (i, joint) in model.joints().iter().enumerate() {
        t *= homogeneous(&joint.offset.rotation, &joint.offset.translation);
        let axis = Unit::new_normalize(joint.axis);
        axes.push(rot_of(&t) * axis.into_inner());
        t *= Rotation3::from_axis_angle(&axis, q[i]).to_homogeneous();
        links.push(t);
    }
    let tool = t * homogeneous(&model.tool().rotation, &model.tool().translation);
    Frames { links, axes, tool }
}

/// Geometric Jacobian `[linear; angular]` of the point `p` rigidly attached
/// to link `k`.
pub fn point_jacobian(f: &Frames, k: usize, p: &Vector3<f64>) -> DMatrix<f64> {
    let n = f.axes.len();
    let mut j = DMatrix::zeros(6, n);
    for i in 0..=k {
        let o = pos_of(&f.links[i]);
        let lin = f.axes[i].cross(&(p - o));
        for r in 0..3 {
            j[(r, i)] = lin[r];
            j[(3 + r, i)] = f.axes[i][r];
        }
    }
    j
}

pub fn tool_jacobian(model: &RobotModel, q: &DVector<f64>) -> DMatrix<f64> {
    let f = frames(model, q);
    point_jacobian(&f, model.dof() - 1, &pos_of(&f.tool))
}

pub fn tool_pose(model: &RobotModel, q: &DVector<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let f = frames(model, q);
    (rot_of(&f.tool), pos_of(&f.tool))
}

/// Mass matrix from link Jacobians: `sum m Jvᵀ Jv + Jwᵀ I Jw`.
pub fn mass_matrix(model: &RobotModel, q: &DVector<f64>) -> DMatrix<f64> {
    let f = frames(model, q);
    let n = model.dof();
    let mut m = DMatrix::zeros(n, n);
    for (k, link) in model.links().iter().enumerate() {
        let r = rot_of(&f.links[k]);
        let c = pos_of(&f.links[k]) + r * link.com;
        let j = point_jacobian(&f, k, &c);
        let jv = j.rows(0, 3);
        let jw = j.rows(3, 3);
        let i_world = r * link.inertia * r.transpose();
        let i_dyn = DMatrix::from_fn(3, 3, |a, b| i_world[(a, b)]);
        m += link.mass * jv.transpose() * jv + jw.transpose() * i_dyn * jw;
    }
    m
}

/// Kinetic plus potential energy.
pub fn energy(model: &RobotModel, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
    let f = frames(model, q);
    let mut e = 0.0;
    for (k, link) in model.links().iter().enumerate() {
        let r = rot_of(&f.links[k]);
        let c = pos_of(&f.links[k]) + r * link.com;
        let twist = point_jacobian(&f, k, &c) * qd;
        let v = Vector3::new(twist[0], twist[1], twist[2]);
        let w = Vector3::new(twist[3], twist[4], twist[5]);
        let i_world = r * link.inertia * r.transpose();
        e += 0.5 * link.mass * v.norm_squared() + 0.5 * w.dot(&(i_world * w)) - link.mass * model.gravity().dot(&c);
    }
    e
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(-3.1..3.1);
    if axis.norm() < 1e-6 {
        return Matrix3::identity();
    }
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

/// Strictly convex QP with `m` inequalities and `p` equalities that is
/// feasible by construction.
pub fn random_qp(rng: &mut impl Rng, d: usize, m: usize, p: usize) -> QpProblem {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let pm = a.transpose() * &a + DMatrix::identity(d, d) * 0.1;
    let q = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    let u0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let l = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * &u0 + DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    let dm = DMatrix::from_fn(p, d, |_, _| rng.random_range(-1.0..1.0));
    let z = &dm * &u0;
    QpProblem::new(pm, q, l, h, dm, z).expect("well-formed random problem")
}

/// Minimiser on the face where the rows `active` of `L` hold with equality,
/// or `None` if the face system is singular.
fn face_minimizer(prob: &QpProblem, active: &[usize]) -> Option<DVector<f64>> {
    let d = prob.dim();
    let k = active.len() + prob.n_eq();
    let mut kkt = DMatrix::zeros(d + k, d + k);
    let mut rhs = DVector::zeros(d + k);
    kkt.view_mut((0, 0), (d, d)).copy_from(prob.p());
    rhs.rows_mut(0, d).copy_from(&(-prob.q()));
    let mut row = d;
    for &i in active {
        for c in 0..d {
            kkt[(row, c)] = prob.l()[(i, c)];
            kkt[(c, row)] = prob.l()[(i, c)];
        }
        rhs[row] = prob.h()[i];
        row += 1;
    }
    for i in 0..prob.n_eq() {
        for c in 0..d {
            kkt[(row, c)] = prob.d()[(i, c)];
            kkt[(c, row)] = prob.d()[(i, c)];
        }
        rhs[row] = prob.z()[i];
        row += 1;
    }
    let sol = kkt.clone().lu().solve(&rhs)?;
    let consistent = sol.iter().all(|v| v.is_finite()) && (&kkt * &sol - &rhs).amax() <= 1e-9 * (1.0 + rhs.amax());
    consistent.then(|| sol.rows(0, d).into_owned())
}

/// Global optimum by enumerating every candidate active set.
pub fn enumerate_qp(prob: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let d = prob.dim();
    let max_active = d.saturating_sub(prob.n_eq()).min(prob.n_ineq());
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut set = Vec::new();
    fn rec(
        prob: &QpProblem,
        start: usize,
        max_active: usize,
        set: &mut Vec<usize>,
        best: &mut Option<(DVector<f64>, f64)>,
    ) {
        if let Some(u) = face_minimizer(prob, set) {
            let feasible = (prob.l() * &u - prob.h()).iter().all(|v| *v <= 1e-9)
                && (prob.d() * &u - prob.z()).iter().all(|v| v.abs() <= 1e-9);
            if feasible {
                let obj = prob.objective(&u);
                if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                    *best = Some((u, obj));
                }
            }
        }
        if set.len() == max_active {
            return;
        }
        for i in start..prob.n_ineq() {
            set.push(i);
            rec(prob, i + 1, max_active, set, best);
            set.pop();
        }
    }
    rec(prob, 0, max_active, &mut set, &mut best);
    best
}

/// Velocity and gravity torques `C(q, q') q' + g(q)` from the Lagrangian by
/// central differences of the oracle mass matrix and energy.
pub fn bias_oracle(model: &RobotModel, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let n = model.dof();
    let h = 1e-6;
    let m_dot = (mass_matrix(model, &(q + qd * h)) - mass_matrix(model, &(q - qd * h))) / (2.0 * h);
    // energy - 2 T = V - T
    let v_minus_t = |q: &DVector<f64>| energy(model, q, qd) - qd.dot(&(mass_matrix(model, q) * qd));
    let grad = DVector::from_fn(n, |i, _| {
        let mut e = DVector::zeros(n);
        e[i] = h;
        (v_minus_t(&(q + &e)) - v_minus_t(&(q - &e))) / (2.0 * h)
    });
    m_dot * qd + grad
}
