//! Inner loop: the control-affine model `v = A(q) u + b(q, q')` with
//! `u = [tau; f_c]`, the weighted tracking QP built on it, and the controller
//! that ties the outer loop, the QP and its fallback together.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::contact::ContactSpec;
use crate::dynamics::{JointState, ModelTerms};
use crate::error::check_len;
use crate::outer_loop::{self, GainSet, MeasuredState, TaskLayout, TaskReference, VirtualInput};
use crate::qp::{ActiveSetSolver, QpOptions, QpProblem, QpStatus};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct AffineSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// `M^-1 (J_u^T f_u - c - g)`.
    pub gamma: DVector<f64>,
    pub layout: TaskLayout,
    m_inv: DMatrix<f64>,
}

impl AffineSystem {
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.a * u + &self.b
    }

    pub fn mass_inverse(&self) -> &DMatrix<f64> {
        &self.m_inv
    }
}

/// Assembles `A` and `b` at the current state. `f_u` is the free-direction
/// wrench (friction) acting on the end effector.
pub fn build_affine(
    terms: &ModelTerms,
    state: &JointState,
    contact: &ContactSpec,
    f_u: &DVector<f64>,
) -> Result<AffineSystem> {
    let n = terms.mass.nrows();
    let nc = contact.n_c();
    check_len("joint velocity", n, state.qdot.len())?;
    check_len("free wrench", 6 - nc, f_u.len())?;
    check_len("contact jacobian columns", n, contact.jc.ncols())?;
    let layout = TaskLayout::new(n, &contact.bases)?;

    let m_inv = terms
        .mass
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Validation("mass matrix is not positive definite".into()))?
        .inverse();
    let gamma = &m_inv * (contact.ju.transpose() * f_u - &terms.coriolis - &terms.gravity);
    let m_inv_jct = &m_inv * contact.jc.transpose();

    let rows = layout.dim();
    let mut a = DMatrix::zeros(rows, n + nc);
    let mut b = DVector::zeros(rows);

    a.view_mut((0, 0), (n, n)).copy_from(&m_inv);
    a.view_mut((0, n), (n, nc)).copy_from(&m_inv_jct);
    b.rows_mut(0, n).copy_from(&gamma);

    let nu = 6 - nc;
    a.view_mut((n, 0), (nu, n)).copy_from(&(&contact.ju * &m_inv));
    a.view_mut((n, n), (nu, nc)).copy_from(&(&contact.ju * &m_inv_jct));
    b.rows_mut(n, nu)
        .copy_from(&(&contact.ju * &gamma + &contact.ju_dot * &state.qdot));

    a.view_mut((n + nu, n), (nc, nc)).fill_with_identity();

    Ok(AffineSystem {
        a,
        b,
        gamma,
        layout,
        m_inv,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlInput {
    pub tau: DVector<f64>,
    pub f_c: DVector<f64>,
}

impl ControlInput {
    pub fn from_stacked(u: &DVector<f64>, n: usize) -> Self {
        Self {
            tau: u.rows(0, n).into_owned(),
            f_c: u.rows(n, u.len() - n).into_owned(),
        }
    }

    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.tau.len() + self.f_c.len(),
            self.tau.iter().chain(self.f_c.iter()).copied(),
        )
    }
}

/// Weights of the joint, free-linear, orientation and force task blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights(pub [f64; 4]);

impl Default for TaskWeights {
    fn default() -> Self {
        Self([0.1, 1.0, 1.0, 1.0])
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.0.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!(
                "task weights must be nonnegative, finite and not all zero (got {:?})",
                self.0
            )));
        }
        Ok(())
    }

    /// Diagonal of `W` for the given task layout.
    pub fn diagonal(&self, layout: &TaskLayout) -> DVector<f64> {
        let mut w = DVector::zeros(layout.dim());
        for (block, rows) in [
            layout.joint_rows(),
            layout.linear_rows(),
            layout.angular_rows(),
            layout.force_rows(),
        ]
        .into_iter()
        .enumerate()
        {
            w.rows_range_mut(rows).fill(self.0[block]);
        }
        w
    }
}

/// Box bounds on `u = [tau; f_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl InputBounds {
    /// `|tau_i| <= tau_max`, `f_min <= f_c <= f_max`.
    pub fn symmetric(n: usize, n_c: usize, tau_max: f64, f_min: f64, f_max: f64) -> Self {
        let lower = DVector::from_fn(n + n_c, |i, _| if i < n { -tau_max } else { f_min });
        let upper = DVector::from_fn(n + n_c, |i, _| if i < n { tau_max } else { f_max });
        Self { lower, upper }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        check_len("lower bounds", dim, self.lower.len())?;
        check_len("upper bounds", dim, self.upper.len())?;
        for (lo, hi) in self.lower.iter().zip(self.upper.iter()) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!("invalid input bound pair [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].clamp(self.lower[i], self.upper[i]))
    }
}

/// Which acceleration-level contact constraint the QP enforces.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintForm {
    /// `J_c q'' + J_c' q' = 0`, the time derivative of `J_c q' = 0`.
    #[default]
    Differentiated,
    /// `J_c q' + J_c' q'' = 0`, with the Jacobians transposed in role. Kept
    /// for comparison only; it is not the derivative of the velocity constraint.
    Uncorrected,
}

/// Standard-form QP for one control step.
#[allow(clippy::too_many_arguments)]
pub fn build_inner_qp(
    aff: &AffineSystem,
    v_star: &VirtualInput,
    weights: &TaskWeights,
    bounds: &InputBounds,
    contact: &ContactSpec,
    state: &JointState,
    form: ConstraintForm,
) -> Result<QpProblem> {
    let n = aff.layout.n;
    let nc = aff.layout.n_c;
    let dim = n + nc;
    weights.validate()?;
    bounds.validate(dim)?;
    check_len("virtual input", aff.layout.dim(), v_star.v_star.len())?;

    let w = weights.diagonal(&aff.layout);
    let wa = DMatrix::from_fn(aff.a.nrows(), dim, |i, j| w[i] * aff.a[(i, j)]);
    let mut p = aff.a.transpose() * &wa;
    p = (&p + p.transpose()) * 0.5;
    let q = wa.transpose() * (&aff.b - &v_star.v_star);

    let c = &contact.friction_c;
    let nf = c.nrows();
    let mut l = DMatrix::zeros(2 * dim + nf, dim);
    l.view_mut((0, 0), (dim, dim)).fill_with_identity();
    l.view_mut((dim, 0), (dim, dim)).copy_from(&(-DMatrix::<f64>::identity(dim, dim)));
    l.view_mut((2 * dim, n), (nf, nc)).copy_from(c);
    let mut h = DVector::zeros(2 * dim + nf);
    h.rows_mut(0, dim).copy_from(&bounds.upper);
    h.rows_mut(dim, dim).copy_from(&(-&bounds.lower));

    let (jm, rhs) = match form {
        ConstraintForm::Differentiated => {
            let jm = &contact.jc * aff.mass_inverse();
            (jm, -(&contact.jc_dot * &state.qdot) - &contact.jc * &aff.gamma)
        }
        ConstraintForm::Uncorrected => {
            let jm = &contact.jc_dot * aff.mass_inverse();
            (jm, -(&contact.jc * &state.qdot) - &contact.jc_dot * &aff.gamma)
        }
    };
    let mut d = DMatrix::zeros(nc, dim);
    d.view_mut((0, 0), (nc, n)).copy_from(&jm);
    d.view_mut((0, n), (nc, nc)).copy_from(&(&jm * contact.jc.transpose()));

    QpProblem::new(p, q, l, h, d, rhs)
}

/// Weighted task residual `sqrt((v - v*)^T W (v - v*))`.
pub fn weighted_residual(v: &DVector<f64>, v_star: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let e = v - v_star;
    e.component_mul(&e).dot(w).sqrt()
}

#[derive(Clone, Debug)]
pub struct ControllerConfig {
    pub weights: TaskWeights,
    pub bounds: InputBounds,
    pub constraint: ConstraintForm,
    pub qp: QpOptions,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub v_star: DVector<f64>,
    pub v_achieved: DVector<f64>,
    pub residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// The QP failed and the previous feasible input was reused.
    pub fallback: bool,
}

/// Outer loop, QP and fallback for one robot.
#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    pub gains: GainSet,
    solver: ActiveSetSolver,
    last_feasible: Option<DVector<f64>>,
}

impl Controller {
    pub fn new(config: ControllerConfig, gains: GainSet) -> Self {
        let solver = ActiveSetSolver::new(config.qp);
        Self {
            config,
            gains,
            solver,
            last_feasible: None,
        }
    }

    /// One control period: virtual input, affine model, QP.
    pub fn control_step(
        &mut self,
        terms: &ModelTerms,
        state: &JointState,
        contact: &ContactSpec,
        reference: &TaskReference,
        measured_force: &DVector<f64>,
        dt: f64,
    ) -> Result<(ControlInput, Diagnostics)> {
        let n = state.q.len();
        let measured = MeasuredState {
            joint: state,
            terms,
            force: measured_force,
        };
        let v = outer_loop::virtual_input(&measured, &contact.bases, reference, &mut self.gains, dt)?;
        let f_u = contact.friction_force(&state.qdot);
        let aff = build_affine(terms, state, contact, &f_u)?;
        let prob = build_inner_qp(
            &aff,
            &v,
            &self.config.weights,
            &self.config.bounds,
            contact,
            state,
            self.config.constraint,
        )?;
        let sol = self.solver.solve(&prob);
        let (u, fallback) = if sol.status == QpStatus::Optimal {
            self.last_feasible = Some(sol.u.clone());
            (sol.u, false)
        } else {
            // hold the last feasible input, or gravity compensation before any solve succeeded
            let held = self.last_feasible.clone().unwrap_or_else(|| {
                let mut u = DVector::zeros(n + contact.n_c());
                u.rows_mut(0, n).copy_from(&(&terms.gravity + &terms.coriolis));
                self.config.bounds.clamp(&u)
            });
            log::warn!("inner QP returned {}; holding previous input", sol.status);
            (held, true)
        };
        let achieved = aff.apply(&u);
        let w = self.config.weights.diagonal(&aff.layout);
        let diag = Diagnostics {
            residual: weighted_residual(&achieved, &v.v_star, &w),
            v_star: v.v_star,
            v_achieved: achieved,
            status: sol.status,
            iterations: sol.iterations,
            fallback,
        };
        Ok((ControlInput::from_stacked(&u, n), diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{FrictionModel, WrenchBases};
    use crate::dynamics::{self, RobotModel};
    use approx::assert_relative_eq;

    fn random_state(n: usize, seed: u64) -> JointState {
        // small deterministic pseudo-random numbers without pulling in an RNG
        let mut x = seed as f64 * 0.618;
        let mut next = || {
            x = (x * 9301.0 + 49297.0) % 233280.0;
            x / 233280.0 - 0.5
        };
        let q = DVector::from_fn(n, |_, _| 2.0 * next());
        let qd = DVector::from_fn(n, |_, _| next());
        JointState::new(q, qd)
    }

    #[test]
    fn affine_model_matches_direct_forward_dynamics() {
        let model = RobotModel::arm6();
        let bases = WrenchBases::probe_axis();
        for seed in 1..6 {
            let state = random_state(6, seed);
            let terms = ModelTerms::compute(&model, &state).unwrap();
            let contact = ContactSpec::build(&bases, &terms, FrictionModel::default(), 0.5).unwrap();
            let f_u = contact.friction_force(&state.qdot);
            let aff = build_affine(&terms, &state, &contact, &f_u).unwrap();
            let tau = DVector::from_fn(6, |i, _| (i as f64 - 2.5) * 3.0);
            let fc = DVector::from_element(1, 12.0);
            let u = ControlInput { tau: tau.clone(), f_c: fc.clone() }.stacked();

            let mass = dynamics::mass_matrix(&model, &state.q).unwrap();
            let h = dynamics::inverse_dynamics(&model, &state.q, &state.qdot, &DVector::zeros(6)).unwrap();
            let rhs = &tau + contact.jc.transpose() * &fc + contact.ju.transpose() * &f_u - h;
            let qdd = mass.lu().solve(&rhs).unwrap();
            let mut expect = DVector::zeros(12);
            expect.rows_mut(0, 6).copy_from(&qdd);
            expect
                .rows_mut(6, 5)
                .copy_from(&(&contact.ju * &qdd + &contact.ju_dot * &state.qdot));
            expect[11] = 12.0;
            assert_relative_eq!(aff.apply(&u), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn static_state_without_gravity_has_zero_bias() {
        let model = RobotModel::arm6().with_gravity(nalgebra::Vector3::zeros());
        let state = JointState::at_rest(crate::ik::arm6_seed());
        let terms = ModelTerms::compute(&model, &state).unwrap();
        let contact = ContactSpec::build(&WrenchBases::probe_axis(), &terms, FrictionModel::default(), 0.5).unwrap();
        let aff = build_affine(&terms, &state, &contact, &DVector::zeros(5)).unwrap();
        assert_eq!(aff.b.amax(), 0.0);
        let bottom = aff.a.view((11, 0), (1, 7)).into_owned();
        assert_eq!(bottom, DMatrix::from_row_slice(1, 7, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn weights_expand_over_blocks() {
        let layout = TaskLayout::new(6, &WrenchBases::probe_axis()).unwrap();
        let w = TaskWeights::default().diagonal(&layout);
        assert_eq!(w.len(), 12);
        assert!(w.rows(0, 6).iter().all(|&x| x == 0.1));
        assert!(w.rows(6, 6).iter().all(|&x| x == 1.0));
        assert!(TaskWeights([0.0; 4]).validate().is_err());
        assert!(TaskWeights([1.0, -1.0, 0.0, 0.0]).validate().is_err());
    }

    #[test]
    fn stacked_input_round_trip() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let c = ControlInput::from_stacked(&u, 2);
        assert_eq!(c.f_c.len(), 1);
        assert_eq!(c.stacked(), u);
    }
}
