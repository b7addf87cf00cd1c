//! Outer loop: turns task references into the virtual input
//! `v* = [q''*; p_u''*; w_E'*; f_c*]`.
//!
//! The Cartesian rows are expressed in the channels of `J_u` (the body-frame
//! free directions), so that `v*` can be compared directly with the affine
//! model `v = A u + b` of the inner loop.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::contact::WrenchBases;
use crate::dynamics::{JointState, ModelTerms};
use crate::error::check_len;
use crate::so3;
use crate::{Error, Result};

pub use crate::so3::{skew, vee};

/// `e_R = 1/2 (R_E^T R_d - R_d^T R_E)^vee`, expressed in the end-effector frame.
///
/// For `R_d = R_E exp(S(d))` this is `sin`-like in `d` and points from the
/// current toward the desired orientation. Ambiguous (zero) at half-turn errors.
pub fn rotation_error(r_e: &Matrix3<f64>, r_d: &Matrix3<f64>) -> Vector3<f64> {
    // vee_unchecked already takes the antisymmetric part
    so3::vee_unchecked(&(r_e.transpose() * r_d))
}

/// Row layout of the task vector for a given set of wrench bases.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskLayout {
    pub n: usize,
    /// Free linear directions (rows of the position block).
    pub n_lin: usize,
    pub n_c: usize,
}

impl TaskLayout {
    /// Requires the free basis to list its purely linear columns first,
    /// followed by exactly three purely angular columns.
    pub fn new(n: usize, bases: &WrenchBases) -> Result<Self> {
        let bu = bases.unconstrained();
        let mut n_lin = 0;
        let mut n_ang = 0;
        for j in 0..bu.ncols() {
            let lin = bu.fixed_view::<3, 1>(0, j).norm();
            let ang = bu.fixed_view::<3, 1>(3, j).norm();
            match (lin > 1e-12, ang > 1e-12) {
                (true, false) if n_ang == 0 => n_lin += 1,
                (false, true) => n_ang += 1,
                _ => {
                    return Err(Error::Config(
                        "free wrench basis must list pure force columns before pure torque columns"
                            .into(),
                    ))
                }
            }
        }
        if n_ang != 3 {
            return Err(Error::Config(format!(
                "free wrench basis must contain all three torque directions, found {n_ang}"
            )));
        }
        Ok(Self {
            n,
            n_lin,
            n_c: bases.n_c(),
        })
    }

    /// Length of the stacked task vector.
    pub fn dim(&self) -> usize {
        self.n + self.n_lin + 3 + self.n_c
    }

    pub fn joint_rows(&self) -> std::ops::Range<usize> {
        0..self.n
    }

    pub fn linear_rows(&self) -> std::ops::Range<usize> {
        self.n..self.n + self.n_lin
    }

    pub fn angular_rows(&self) -> std::ops::Range<usize> {
        self.n + self.n_lin..self.n + self.n_lin + 3
    }

    pub fn force_rows(&self) -> std::ops::Range<usize> {
        self.n + self.n_lin + 3..self.dim()
    }
}

/// World directions spanned by the free linear channels at orientation `r`,
/// one column per channel: `p_u = T^T p_E`.
pub fn free_linear_directions(bases: &WrenchBases, layout: &TaskLayout, r: &Matrix3<f64>) -> DMatrix<f64> {
    let bu = bases.unconstrained();
    let mut t = DMatrix::zeros(3, layout.n_lin);
    for j in 0..layout.n_lin {
        let d: Vector3<f64> = r * bu.fixed_view::<3, 1>(0, j);
        t.column_mut(j).copy_from(&d);
    }
    t
}

/// Desired values of every task and their derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskReference {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub qddot: DVector<f64>,
    /// Free-direction position `T^T p_E` (m) and derivatives.
    pub p_u: DVector<f64>,
    pub pdot_u: DVector<f64>,
    pub pddot_u: DVector<f64>,
    pub rotation: Matrix3<f64>,
    /// World-frame angular velocity and acceleration.
    pub omega: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
    pub force: DVector<f64>,
}

impl TaskReference {
    fn check(&self, layout: &TaskLayout) -> Result<()> {
        check_len("reference q", layout.n, self.q.len())?;
        check_len("reference qdot", layout.n, self.qdot.len())?;
        check_len("reference qddot", layout.n, self.qddot.len())?;
        check_len("reference p_u", layout.n_lin, self.p_u.len())?;
        check_len("reference p_u'", layout.n_lin, self.pdot_u.len())?;
        check_len("reference p_u''", layout.n_lin, self.pddot_u.len())?;
        check_len("reference force", layout.n_c, self.force.len())?;
        so3::validate_rotation(&self.rotation, "desired rotation")
    }
}

/// Diagonal PID gains plus the force integral state.
#[derive(Clone, Debug, PartialEq)]
pub struct GainSet {
    pub kq_p: DVector<f64>,
    pub kq_d: DVector<f64>,
    pub ku_p: DVector<f64>,
    pub ku_d: DVector<f64>,
    /// Orientation gains, applied in the end-effector frame.
    pub kr_p: Vector3<f64>,
    pub kr_d: Vector3<f64>,
    pub kc_p: DVector<f64>,
    pub kc_i: DVector<f64>,
    /// Integral of `f_c - f_c^d` (N s), clamped elementwise to `integral_clamp`.
    pub force_integral: DVector<f64>,
    pub integral_clamp: f64,
}

impl GainSet {
    /// Uniform gains. The integral state starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        layout: &TaskLayout,
        kq: (f64, f64),
        ku: (f64, f64),
        kr: (f64, f64),
        kc: (f64, f64),
        integral_clamp: f64,
    ) -> Self {
        Self {
            kq_p: DVector::from_element(layout.n, kq.0),
            kq_d: DVector::from_element(layout.n, kq.1),
            ku_p: DVector::from_element(layout.n_lin, ku.0),
            ku_d: DVector::from_element(layout.n_lin, ku.1),
            kr_p: Vector3::repeat(kr.0),
            kr_d: Vector3::repeat(kr.1),
            kc_p: DVector::from_element(layout.n_c, kc.0),
            kc_i: DVector::from_element(layout.n_c, kc.1),
            force_integral: DVector::zeros(layout.n_c),
            integral_clamp,
        }
    }

    /// Scenario defaults. Joint and task gains match so the posture task does
    /// not pull against the Cartesian tasks.
    pub fn scenario_default(layout: &TaskLayout) -> Self {
        Self::uniform(
            layout,
            (2500.0, 100.0),
            (2500.0, 100.0),
            (2500.0, 100.0),
            (0.2, 10.0),
            20.0,
        )
    }

    pub fn validate(&self, layout: &TaskLayout) -> Result<()> {
        check_len("kq_p", layout.n, self.kq_p.len())?;
        check_len("kq_d", layout.n, self.kq_d.len())?;
        check_len("ku_p", layout.n_lin, self.ku_p.len())?;
        check_len("ku_d", layout.n_lin, self.ku_d.len())?;
        check_len("kc_p", layout.n_c, self.kc_p.len())?;
        check_len("kc_i", layout.n_c, self.kc_i.len())?;
        check_len("force integral", layout.n_c, self.force_integral.len())?;
        let all = self
            .kq_p
            .iter()
            .chain(self.kq_d.iter())
            .chain(self.ku_p.iter())
            .chain(self.ku_d.iter())
            .chain(self.kr_p.iter())
            .chain(self.kr_d.iter())
            .chain(self.kc_p.iter())
            .chain(self.kc_i.iter());
        for g in all {
            if !(*g >= 0.0) || !g.is_finite() {
                return Err(Error::Config("gains must be finite and nonnegative".into()));
            }
        }
        if !(self.integral_clamp >= 0.0) {
            return Err(Error::Config("integral clamp must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn reset_integral(&mut self) {
        self.force_integral.fill(0.0);
    }
}

/// Stacked virtual input.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualInput {
    pub v_star: DVector<f64>,
    pub layout: TaskLayout,
}

impl VirtualInput {
    pub fn joint(&self) -> DVector<f64> {
        self.v_star.rows_range(self.layout.joint_rows()).into_owned()
    }

    pub fn linear(&self) -> DVector<f64> {
        self.v_star.rows_range(self.layout.linear_rows()).into_owned()
    }

    pub fn angular(&self) -> DVector<f64> {
        self.v_star.rows_range(self.layout.angular_rows()).into_owned()
    }

    pub fn force(&self) -> DVector<f64> {
        self.v_star.rows_range(self.layout.force_rows()).into_owned()
    }
}

/// Measured robot state seen by the controller.
pub struct MeasuredState<'a> {
    pub joint: &'a JointState,
    pub terms: &'a ModelTerms,
    /// Contact force along the constrained directions (N).
    pub force: &'a DVector<f64>,
}

/// Computes `v*` and advances the force integral by `dt`.
///
/// Rows:
/// * joints: `q''_d - Kq_D (q' - q'_d) - Kq_P (q - q_d)`
/// * free linear: PD on `p_u = T^T p_E` mapped to the `J_u` channels
/// * orientation: `w'_d - K_R^D (w - w_d) + K_R^P e_R` in the end-effector frame
/// * force: `f_d - Kc_P (f - f_d) - Kc_I * integral(f - f_d)`
pub fn virtual_input(
    state: &MeasuredState<'_>,
    bases: &WrenchBases,
    reference: &TaskReference,
    gains: &mut GainSet,
    dt: f64,
) -> Result<VirtualInput> {
    if !(dt > 0.0) {
        return Err(Error::Validation("control period must be positive".into()));
    }
    let layout = TaskLayout::new(state.joint.q.len(), bases)?;
    reference.check(&layout)?;
    gains.validate(&layout)?;
    check_len("measured force", layout.n_c, state.force.len())?;

    let mut v = DVector::zeros(layout.dim());

    // joint block
    let eq = &state.joint.q - &reference.q;
    let edq = &state.joint.qdot - &reference.qdot;
    let qdd = &reference.qddot - gains.kq_d.component_mul(&edq) - gains.kq_p.component_mul(&eq);
    v.rows_range_mut(layout.joint_rows()).copy_from(&qdd);

    let r_e = &state.terms.pose.rotation;
    let p_e = &state.terms.pose.position;
    let vel = state.terms.linear_velocity();
    let omega = state.terms.angular_velocity();
    let bu = bases.unconstrained();

    // free linear block
    if layout.n_lin > 0 {
        let t = free_linear_directions(bases, &layout, &reference.rotation);
        let p_u = t.transpose() * p_e;
        let pdot_u = t.transpose() * vel;
        let pdd = &reference.pddot_u
            - gains.ku_d.component_mul(&(pdot_u - &reference.pdot_u))
            - gains.ku_p.component_mul(&(p_u - &reference.p_u));
        let accel_world = &t * pdd;
        let accel_world = Vector3::new(accel_world[0], accel_world[1], accel_world[2]);
        // d/dt (R_E b)^T v = (R_E b)^T (a - w x v)
        let target = accel_world - omega.cross(&vel);
        for (k, row) in layout.linear_rows().enumerate() {
            let dir = r_e * bu.fixed_view::<3, 1>(0, k);
            v[row] = dir.dot(&target);
        }
    }

    // orientation block, end-effector frame
    let e_r = rotation_error(r_e, &reference.rotation);
    let w_err_body = r_e.transpose() * (omega - reference.omega);
    let wd_body = r_e.transpose() * reference.omega_dot - gains.kr_d.component_mul(&w_err_body)
        + gains.kr_p.component_mul(&e_r);
    let wd_world = r_e * wd_body;
    for (k, row) in layout.angular_rows().enumerate() {
        let dir = r_e * bu.fixed_view::<3, 1>(3, layout.n_lin + k);
        v[row] = dir.dot(&wd_world);
    }

    // force block: uses the integral accumulated so far, then advances it
    let ef = state.force - &reference.force;
    let f_star = &reference.force - gains.kc_p.component_mul(&ef) - gains.kc_i.component_mul(&gains.force_integral);
    v.rows_range_mut(layout.force_rows()).copy_from(&f_star);
    let clamp = gains.integral_clamp;
    gains.force_integral += &ef * dt;
    gains.force_integral.apply(|x| *x = x.clamp(-clamp, clamp));

    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("virtual input is not finite".into()));
    }
    Ok(VirtualInput { v_star: v, layout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::RobotModel;
    use crate::ik;
    use approx::assert_relative_eq;

    fn board_rotation() -> Matrix3<f64> {
        Matrix3::from_columns(&[-Vector3::z(), Vector3::y(), Vector3::x()])
    }

    fn setup() -> (RobotModel, JointState, ModelTerms) {
        let model = RobotModel::arm6();
        let target = crate::dynamics::EndEffectorPose {
            rotation: board_rotation(),
            position: Vector3::new(0.6, 0.0, 0.7),
        };
        let q = ik::solve_pose(&model, &target, &ik::arm6_seed(), &Default::default()).unwrap();
        let state = JointState::at_rest(q);
        let terms = ModelTerms::compute(&model, &state).unwrap();
        (model, state, terms)
    }

    fn matching_reference(state: &JointState, terms: &ModelTerms, layout: &TaskLayout, f: f64) -> TaskReference {
        let t = free_linear_directions(&WrenchBases::probe_axis(), layout, &board_rotation());
        TaskReference {
            q: state.q.clone(),
            qdot: DVector::zeros(layout.n),
            qddot: DVector::from_element(layout.n, 0.3),
            p_u: t.transpose() * terms.pose.position,
            pdot_u: DVector::zeros(2),
            pddot_u: DVector::from_vec(vec![0.1, -0.2]),
            rotation: terms.pose.rotation,
            omega: Vector3::zeros(),
            omega_dot: Vector3::new(0.01, 0.02, 0.03),
            force: DVector::from_element(1, f),
        }
    }

    #[test]
    fn rotation_error_small_angle_about_z() {
        let th = 1e-3;
        let e = rotation_error(&Matrix3::identity(), &so3::rot_z(th));
        assert_relative_eq!(e, Vector3::new(0.0, 0.0, th.sin()), epsilon = 1e-15);
        let e2 = rotation_error(&so3::rot_z(th), &Matrix3::identity());
        assert_relative_eq!(e2, -e, epsilon = 1e-15);
    }

    #[test]
    fn zero_error_gives_pure_feedforward() {
        let (_m, state, terms) = setup();
        let bases = WrenchBases::probe_axis();
        let layout = TaskLayout::new(6, &bases).unwrap();
        let r = matching_reference(&state, &terms, &layout, 12.0);
        let mut gains = GainSet::scenario_default(&layout);
        let f = DVector::from_element(1, 12.0);
        let ms = MeasuredState { joint: &state, terms: &terms, force: &f };
        let vi = virtual_input(&ms, &bases, &r, &mut gains, 1e-3).unwrap();
        assert_relative_eq!(vi.joint(), r.qddot, epsilon = 1e-12);
        // at R_E = R_d the linear channels are exactly p_u''
        assert_relative_eq!(vi.linear(), r.pddot_u, epsilon = 1e-12);
        assert_relative_eq!(vi.angular(), DVector::from_vec(vec![-0.03, 0.02, 0.01]), epsilon = 1e-12);
        assert_relative_eq!(vi.force()[0], 12.0);
    }

    #[test]
    fn proportional_force_row() {
        let (_m, state, terms) = setup();
        let bases = WrenchBases::probe_axis();
        let layout = TaskLayout::new(6, &bases).unwrap();
        let r = matching_reference(&state, &terms, &layout, 10.0);
        let mut gains = GainSet::scenario_default(&layout);
        gains.kc_p[0] = 2.0;
        let f = DVector::from_element(1, 11.0);
        let ms = MeasuredState { joint: &state, terms: &terms, force: &f };
        let vi = virtual_input(&ms, &bases, &r, &mut gains, 1e-3).unwrap();
        assert_relative_eq!(vi.force()[0], 10.0 - 2.0, epsilon = 1e-14);
        assert_relative_eq!(gains.force_integral[0], 1e-3, epsilon = 1e-15);
    }

    #[test]
    fn static_joint_reference_is_pd() {
        let (_m, mut state, _) = setup();
        let model = RobotModel::arm6();
        let q_ref = state.q.clone();
        let e = DVector::from_vec(vec![0.01, -0.02, 0.03, 0.0, 0.01, -0.01]);
        state.q += &e;
        state.qdot = DVector::from_vec(vec![0.1, 0.0, -0.1, 0.2, 0.0, 0.05]);
        let terms = ModelTerms::compute(&model, &state).unwrap();
        let bases = WrenchBases::probe_axis();
        let layout = TaskLayout::new(6, &bases).unwrap();
        let mut r = matching_reference(&state, &terms, &layout, 10.0);
        r.q = q_ref;
        r.qddot = DVector::zeros(6);
        let mut gains = GainSet::scenario_default(&layout);
        let f = DVector::from_element(1, 10.0);
        let ms = MeasuredState { joint: &state, terms: &terms, force: &f };
        let vi = virtual_input(&ms, &bases, &r, &mut gains, 1e-3).unwrap();
        let expect = -(&gains.kq_d.component_mul(&state.qdot)) - gains.kq_p.component_mul(&e);
        assert_relative_eq!(vi.joint(), expect, epsilon = 1e-12);
    }

    #[test]
    fn integral_respects_clamp() {
        let (_m, state, terms) = setup();
        let bases = WrenchBases::probe_axis();
        let layout = TaskLayout::new(6, &bases).unwrap();
        let r = matching_reference(&state, &terms, &layout, 10.0);
        let mut gains = GainSet::scenario_default(&layout);
        gains.integral_clamp = 0.5;
        let f = DVector::from_element(1, 60.0);
        let ms = MeasuredState { joint: &state, terms: &terms, force: &f };
        for _ in 0..100 {
            virtual_input(&ms, &bases, &r, &mut gains, 0.01).unwrap();
            assert!(gains.force_integral[0].abs() <= 0.5);
        }
        assert_eq!(gains.force_integral[0], 0.5);
    }

    #[test]
    fn layout_for_point_contact_has_no_linear_rows() {
        let l = TaskLayout::new(6, &WrenchBases::point_contact()).unwrap();
        assert_eq!((l.n_lin, l.n_c, l.dim()), (0, 3, 12));
    }
}
