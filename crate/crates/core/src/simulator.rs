//! Constrained rigid-body simulation of the arm sliding on a plane, and the
//! closed loop that drives it with the controller.
//!
//! The plant deliberately avoids the controller's explicit `M, c, g`
//! assembly: the mass matrix comes from unit-acceleration inverse-dynamics
//! calls and the bias from one more call, and the contact is modelled as a
//! point force along the plane normal rather than through the wrench bases.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::contact::{ContactSpec, FrictionModel, WrenchBases};
use crate::dynamics::{self, EndEffectorPose, JointState, ModelTerms, RobotModel};
use crate::ik;
use crate::impedance::StiffnessSchedule;
use crate::inner_loop::{ConstraintForm, Controller, ControllerConfig, InputBounds, TaskWeights};
use crate::outer_loop::{self, free_linear_directions, GainSet, TaskLayout, TaskReference};
use crate::qp::{QpOptions, QpStatus};
use crate::{Error, Result};

/// Rigid plane. `normal` points out of the surface toward the robot.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Plane {
    pub fn new(point: Vector3<f64>, normal: Vector3<f64>) -> Result<Self> {
        if (normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("plane normal must be unit length, |n| = {}", normal.norm())));
        }
        Ok(Self { point, normal })
    }

    /// Signed distance of `p` from the plane, positive on the robot side.
    pub fn gap(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.point))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantParams {
    /// Velocity-level stabilization gain (1/s), enters as `2 alpha`.
    pub baumgarte_alpha: f64,
    /// Position-level stabilization gain (1/s), enters as `beta^2`.
    pub baumgarte_beta: f64,
    pub friction: FrictionModel,
    /// Integration substeps per control period; torques are held constant.
    pub substeps: usize,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            baumgarte_alpha: 20.0,
            baumgarte_beta: 20.0,
            friction: FrictionModel::default(),
            substeps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub qddot: DVector<f64>,
    /// Normal force pushing the end effector away from the plane (N).
    pub force: f64,
    /// Tangential friction force on the end effector, world frame (N).
    pub friction: Vector3<f64>,
}

/// Mass matrix and bias `c + g` through inverse dynamics only.
pub fn plant_dynamics(model: &RobotModel, state: &JointState) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = model.dof();
    let zero = DVector::zeros(n);
    let h = dynamics::inverse_dynamics(model, &state.q, &state.qdot, &zero)?;
    let g = dynamics::inverse_dynamics(model, &state.q, &zero, &zero)?;
    let mut m = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for i in 0..n {
        e[i] = 1.0;
        let col = dynamics::inverse_dynamics(model, &state.q, &zero, &e)? - &g;
        m.set_column(i, &col);
        e[i] = 0.0;
    }
    Ok(((&m + m.transpose()) * 0.5, h))
}

/// Accelerations and constraint force for torques `tau`. With `plane = None`
/// the arm is in free flight.
pub fn constrained_forward_dynamics(
    model: &RobotModel,
    state: &JointState,
    tau: &DVector<f64>,
    plane: Option<&Plane>,
    params: &PlantParams,
) -> Result<ForwardResult> {
    let n = model.dof();
    crate::error::check_len("torque", n, tau.len())?;
    let (m, h) = plant_dynamics(model, state)?;
    let Some(plane) = plane else {
        let qddot = m
            .cholesky()
            .ok_or_else(|| Error::Validation("plant mass matrix is not positive definite".into()))?
            .solve(&(tau - h));
        return Ok(ForwardResult {
            qddot,
            force: 0.0,
            friction: Vector3::zeros(),
        });
    };

    let pose = dynamics::forward_kinematics(model, &state.q)?;
    let j = dynamics::jacobian(model, &state.q)?;
    let jd = dynamics::jacobian_dot(model, state)?;
    let jv = j.rows(0, 3).into_owned();
    let twist = &j * &state.qdot;
    let omega = Vector3::new(twist[3], twist[4], twist[5]);
    // the probe presses along its own axis; the gap is measured along the plane normal
    let cj = crate::contact::constrained_jacobians(&j, &jd, &WrenchBases::probe_axis(), &pose.rotation, &omega)?;
    let jn = cj.jc;
    let jnd = cj.jc_dot;

    let nrm = plane.normal;
    let v = Vector3::new(twist[0], twist[1], twist[2]);
    let friction = -params.friction.viscous * (v - nrm * nrm.dot(&v));

    let vn = (&jn * &state.qdot)[0];
    let gap = plane.gap(&pose.position);
    let a = params.baumgarte_alpha;
    let b = params.baumgarte_beta;

    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    kkt.view_mut((0, 0), (n, n)).copy_from(&m);
    for i in 0..n {
        kkt[(i, n)] = -jn[(0, i)];
        kkt[(n, i)] = jn[(0, i)];
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n)
        .copy_from(&(tau + jv.transpose() * friction - &h));
    rhs[n] = -(&jnd * &state.qdot)[0] - 2.0 * a * vn - b * b * gap;

    let lu = kkt.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Validation("contact KKT system is singular".into()))?;
    if let Some(dx) = lu.solve(&(&rhs - &kkt * &x)) {
        x += dx;
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Validation("contact KKT solution is not finite".into()));
    }
    Ok(ForwardResult {
        qddot: x.rows(0, n).into_owned(),
        force: x[n],
        friction,
    })
}

/// Semi-implicit Euler: velocity first, then position with the new velocity.
pub fn step(state: &JointState, qddot: &DVector<f64>, dt: f64) -> Result<JointState> {
    let qdot = &state.qdot + qddot * dt;
    let q = &state.q + &qdot * dt;
    if q.iter().chain(qdot.iter()).all(|v| v.is_finite()) {
        Ok(JointState::new(q, qdot))
    } else {
        Err(Error::Validation("state became non-finite".into()))
    }
}

/// Central finite difference of `J_c q'` along `(q', q'')`: the rate the
/// velocity constraint would change at if `qddot` were applied.
pub fn constraint_rate_fd(
    model: &RobotModel,
    bases: &WrenchBases,
    state: &JointState,
    qddot: &DVector<f64>,
    h: f64,
) -> Result<DVector<f64>> {
    let eval = |s: f64| -> Result<DVector<f64>> {
        let q = &state.q + &state.qdot * (s * h) + qddot * (0.5 * h * h);
        let qd = &state.qdot + qddot * (s * h);
        let pose = dynamics::forward_kinematics(model, &q)?;
        let j = dynamics::jacobian(model, &q)?;
        let (g, _) = crate::contact::contact_maps(bases, &pose.rotation)?;
        Ok(g.transpose() * j * qd)
    };
    Ok((eval(1.0)? - eval(-1.0)?) / (2.0 * h))
}

/// Desired contact force over time.
#[derive(Clone, Debug, PartialEq)]
pub enum ForceProfile {
    Sinusoid { amplitude: f64, period: f64, offset: f64 },
    Step { value: f64 },
    /// Piecewise-linear through `(t, f)` knots, held constant outside.
    Schedule(Vec<(f64, f64)>),
}

impl ForceProfile {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            ForceProfile::Sinusoid {
                amplitude,
                period,
                offset,
            } => amplitude * (2.0 * std::f64::consts::PI * t / period).sin() + offset,
            ForceProfile::Step { value } => *value,
            ForceProfile::Schedule(knots) => interpolate(knots, t),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ForceProfile::Sinusoid { period, .. } if !(*period > 0.0) => {
                Err(Error::Config("sinusoid period must be positive".into()))
            }
            ForceProfile::Schedule(k) if k.is_empty() || k.windows(2).any(|w| !(w[1].0 > w[0].0)) => Err(
                Error::Config("force schedule needs strictly increasing times".into()),
            ),
            _ => Ok(()),
        }
    }
}

pub(crate) fn interpolate(knots: &[(f64, f64)], t: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let i = knots.partition_point(|k| k.0 <= t);
    let (t0, f0) = knots[i - 1];
    let (t1, f1) = knots[i];
    f0 + (f1 - f0) * (t - t0) / (t1 - t0)
}

/// Cartesian reference sample handed to the controller.
#[derive(Clone, Debug, PartialEq)]
pub struct CartesianReference {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub force: f64,
}

/// Produces the Cartesian reference at each control tick.
pub trait ReferenceSource {
    fn sample(&mut self, t: f64, measured: &EndEffectorPose) -> Result<CartesianReference>;
}

/// Straight-line sweep at constant speed, stopping at the end point.
#[derive(Clone, Debug)]
pub struct LineSweep {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub speed: f64,
    pub rotation: Matrix3<f64>,
    pub force: ForceProfile,
}

impl LineSweep {
    fn travel_time(&self) -> f64 {
        if self.speed > 0.0 {
            (self.end - self.start).norm() / self.speed
        } else {
            0.0
        }
    }
}

impl ReferenceSource for LineSweep {
    fn sample(&mut self, t: f64, _measured: &EndEffectorPose) -> Result<CartesianReference> {
        let d = self.end - self.start;
        let len = d.norm();
        let dir = if len > 0.0 { d / len } else { Vector3::zeros() };
        let tt = self.travel_time();
        let (position, velocity) = if t < tt {
            (self.start + dir * (self.speed * t.max(0.0)), dir * self.speed)
        } else {
            (self.end, Vector3::zeros())
        };
        let position = if self.speed > 0.0 { position } else { self.start };
        Ok(CartesianReference {
            position,
            velocity,
            acceleration: Vector3::zeros(),
            rotation: self.rotation,
            force: self.force.value(t),
        })
    }
}

/// Everything the closed loop needs besides the reference source.
#[derive(Clone, Debug)]
pub struct LoopSetup {
    pub robot: RobotModel,
    pub plane: Plane,
    pub plant: PlantParams,
    pub mu: f64,
    pub duration: f64,
    pub control_rate: f64,
    pub press_in: f64,
    pub weights: TaskWeights,
    pub gains: GainSet,
    pub bounds: InputBounds,
    pub constraint: ConstraintForm,
    pub qp: QpOptions,
    /// Seed configuration for the initial inverse kinematics.
    pub q_seed: DVector<f64>,
    /// Optional learned stiffness applied to the Cartesian gains.
    pub stiffness: Option<StiffnessSchedule>,
    /// Record `constraint_rate_fd` of the planned acceleration at every step.
    pub check_constraint: bool,
}

/// Line-sweep force-tracking scenario on a plane.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub setup: LoopSetup,
    pub sweep: LineSweep,
    pub seed: u64,
}

impl Scenario {
    /// The sliding experiment: board at `x = 0.6`, sweep from
    /// `(0.6, 0, 0.6)` to `(0.6, 0, 0.9)` at 0.05 m/s for 6 s at 1 kHz.
    pub fn board_sweep(force: ForceProfile) -> Self {
        let robot = RobotModel::arm6();
        let bases = WrenchBases::probe_axis();
        let layout = TaskLayout::new(robot.dof(), &bases).expect("probe-axis layout");
        Self {
            setup: LoopSetup {
                plane: Plane::new(Vector3::new(0.6, 0.0, 0.0), -Vector3::x()).expect("unit normal"),
                plant: PlantParams::default(),
                mu: 0.5,
                duration: 6.0,
                control_rate: 1000.0,
                press_in: 0.2,
                weights: TaskWeights::default(),
                gains: GainSet::scenario_default(&layout),
                bounds: InputBounds::symmetric(robot.dof(), 1, 50.0, 0.0, 60.0),
                constraint: ConstraintForm::Differentiated,
                qp: QpOptions::default(),
                q_seed: ik::arm6_seed(),
                stiffness: None,
                check_constraint: false,
                robot,
            },
            sweep: LineSweep {
                start: Vector3::new(0.6, 0.0, 0.6),
                end: Vector3::new(0.6, 0.0, 0.9),
                speed: 0.05,
                rotation: board_rotation(),
                force,
            },
            seed: 0,
        }
    }
}

/// Probe axis along world +x, sweep direction opposite the first axis.
pub fn board_rotation() -> Matrix3<f64> {
    Matrix3::from_columns(&[-Vector3::z(), Vector3::y(), Vector3::x()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub position: Vector3<f64>,
    pub reference_position: Vector3<f64>,
    /// Norm of the geometric rotation error to the desired orientation (rad).
    pub rotation_error: f64,
    /// Plant contact force (N).
    pub force: f64,
    pub force_desired: f64,
    /// Contact force planned by the QP (N).
    pub force_command: f64,
    pub tau: DVector<f64>,
    pub qp_iterations: usize,
    pub qp_status: QpStatus,
    pub fallback: bool,
    pub residual: f64,
    pub gap: f64,
    /// `J_c q'` with the controller's contact Jacobian.
    pub constraint_velocity: f64,
    /// Finite-difference rate of `J_c q'` under the planned acceleration, if enabled.
    pub constraint_rate: Option<f64>,
}

impl LogRecord {
    pub fn position_error(&self) -> Vector3<f64> {
        self.position - self.reference_position
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SimEvent {
    /// The plane had to pull on the end effector.
    ContactTension { t: f64, force: f64 },
    ControllerFallback { t: f64, status: QpStatus },
}

/// Work and energy bookkeeping over the logged run (J).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyAudit {
    pub initial: f64,
    pub last: f64,
    pub actuator_work: f64,
    pub friction_work: f64,
    pub contact_work: f64,
}

impl EnergyAudit {
    /// Mechanical energy change not explained by the work of external forces.
    pub fn drift(&self) -> f64 {
        (self.last - self.initial) - (self.actuator_work + self.friction_work + self.contact_work)
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryLog {
    pub dof: usize,
    pub dt: f64,
    pub records: Vec<LogRecord>,
    pub events: Vec<SimEvent>,
    pub energy: EnergyAudit,
}

impl TrajectoryLog {
    /// Records with `t >= t0`.
    pub fn after(&self, t0: f64) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.t >= t0 - 1e-12)
    }

    pub fn last(&self) -> &LogRecord {
        self.records.last().expect("log is never empty")
    }

    pub fn at_time(&self, t: f64) -> Option<&LogRecord> {
        self.records.iter().find(|r| (r.t - t).abs() < 0.5 * self.dt)
    }
}

/// Linear Jacobian and probe-axis constraint Jacobian at `q`.
fn probe_jacobians(model: &RobotModel, q: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pose = dynamics::forward_kinematics(model, q)?;
    let j = dynamics::jacobian(model, q)?;
    let (g, _) = crate::contact::contact_maps(&WrenchBases::probe_axis(), &pose.rotation)?;
    Ok((j.rows(0, 3).into_owned(), g.transpose() * j))
}

/// Contact forces below this (tension) are reported as events.
const TENSION_TOL: f64 = 1e-9;

fn mechanical_energy(model: &RobotModel, state: &JointState) -> Result<f64> {
    Ok(dynamics::kinetic_energy(model, state)? + dynamics::potential_energy(model, &state.q)?)
}

/// Applies a learned stiffness at time `t` to the Cartesian gains.
fn apply_stiffness(schedule: &StiffnessSchedule, t: f64, rotation: &Matrix3<f64>, bases: &WrenchBases, layout: &TaskLayout, gains: &mut GainSet) {
    let (kp, _) = schedule.at(t);
    let kpos = Matrix3::from_diagonal(&Vector3::new(kp[0], kp[1], kp[2]));
    let krot = Matrix3::from_diagonal(&Vector3::new(kp[3], kp[4], kp[5]));
    let t_dirs = free_linear_directions(bases, layout, rotation);
    for j in 0..layout.n_lin {
        let d = Vector3::new(t_dirs[(0, j)], t_dirs[(1, j)], t_dirs[(2, j)]);
        let k = d.dot(&(kpos * d));
        gains.ku_p[j] = k;
        gains.ku_d[j] = 2.0 * k.sqrt();
    }
    // orientation gains act in the end-effector frame
    let kb = rotation.transpose() * krot * rotation;
    for i in 0..3 {
        gains.kr_p[i] = kb[(i, i)];
        gains.kr_d[i] = 2.0 * kb[(i, i)].sqrt();
    }
}

/// Runs press-in and the timed loop against `source`.
pub fn run_closed_loop(setup: &LoopSetup, source: &mut dyn ReferenceSource) -> Result<TrajectoryLog> {
    if !(setup.control_rate > 0.0) || !(setup.duration > 0.0) || !(setup.press_in >= 0.0) {
        return Err(Error::Config("control rate and duration must be positive".into()));
    }
    let model = &setup.robot;
    let n = model.dof();
    let bases = WrenchBases::probe_axis();
    let layout = TaskLayout::new(n, &bases)?;
    setup.gains.validate(&layout)?;
    let dt = 1.0 / setup.control_rate;
    let steps = (setup.duration * setup.control_rate).round() as i64;
    let press = (setup.press_in * setup.control_rate).round() as i64;

    let pose_guess = dynamics::forward_kinematics(model, &setup.q_seed)?;
    let first = source.sample(0.0, &pose_guess)?;
    let start_pose = EndEffectorPose {
        rotation: first.rotation,
        position: first.position,
    };
    let q0 = ik::solve_pose(model, &start_pose, &setup.q_seed, &ik::IkOptions::default())?;
    let mut state = JointState::at_rest(q0.clone());
    let mut q_ref_prev = q0;

    let config = ControllerConfig {
        weights: setup.weights,
        bounds: setup.bounds.clone(),
        constraint: setup.constraint,
        qp: setup.qp,
    };
    let mut controller = Controller::new(config, setup.gains.clone());
    let mut measured = DVector::zeros(1);

    let mut records = Vec::with_capacity((steps + press + 1) as usize);
    let mut events = Vec::new();
    let mut energy = EnergyAudit {
        initial: mechanical_energy(model, &state)?,
        ..Default::default()
    };

    for k in -press..=steps {
        let t = k as f64 * dt;
        let terms = ModelTerms::compute(model, &state)?;
        let sim_err = |e: Error| Error::Simulation {
            t,
            message: e.to_string(),
        };

        let reference = if k < 0 {
            let ramp = (k + press) as f64 / press as f64;
            CartesianReference {
                velocity: Vector3::zeros(),
                acceleration: Vector3::zeros(),
                force: first.force * ramp,
                ..first.clone()
            }
        } else {
            source.sample(t, &terms.pose)?
        };

        if let Some(schedule) = &setup.stiffness {
            apply_stiffness(schedule, t.max(0.0), &reference.rotation, &bases, &layout, &mut controller.gains);
        }

        let target = EndEffectorPose {
            rotation: reference.rotation,
            position: reference.position,
        };
        let zero3 = Vector3::zeros();
        let jr = ik::joint_reference(
            model,
            &target,
            &ik::twist(reference.velocity, zero3),
            &ik::twist(reference.acceleration, zero3),
            &q_ref_prev,
        )
        .map_err(sim_err)?;
        q_ref_prev = jr.q.clone();

        let t_dirs = free_linear_directions(&bases, &layout, &reference.rotation);
        let task = TaskReference {
            q: jr.q,
            qdot: jr.qdot,
            qddot: jr.qddot,
            p_u: t_dirs.transpose() * reference.position,
            pdot_u: t_dirs.transpose() * reference.velocity,
            pddot_u: t_dirs.transpose() * reference.acceleration,
            rotation: reference.rotation,
            omega: zero3,
            omega_dot: zero3,
            force: DVector::from_element(1, reference.force),
        };

        let contact = ContactSpec::build(&bases, &terms, setup.plant.friction, setup.mu)?;
        let (u, diag) = controller
            .control_step(&terms, &state, &contact, &task, &measured, dt)
            .map_err(sim_err)?;
        if diag.fallback {
            events.push(SimEvent::ControllerFallback { t, status: diag.status });
        }

        let fwd = constrained_forward_dynamics(model, &state, &u.tau, Some(&setup.plane), &setup.plant)
            .map_err(sim_err)?;
        if fwd.force < -TENSION_TOL {
            events.push(SimEvent::ContactTension { t, force: fwd.force });
        }

        let constraint_rate = if setup.check_constraint {
            let planned = diag.v_achieved.rows(0, n).into_owned();
            Some(constraint_rate_fd(model, &bases, &state, &planned, 1e-5)?.amax())
        } else {
            None
        };

        records.push(LogRecord {
            t,
            q: state.q.clone(),
            qdot: state.qdot.clone(),
            position: terms.pose.position,
            reference_position: reference.position,
            rotation_error: outer_loop::rotation_error(&terms.pose.rotation, &reference.rotation).norm(),
            force: fwd.force,
            force_desired: reference.force,
            force_command: u.f_c[0],
            tau: u.tau.clone(),
            qp_iterations: diag.iterations,
            qp_status: diag.status,
            fallback: diag.fallback,
            residual: diag.residual,
            gap: setup.plane.gap(&terms.pose.position),
            constraint_velocity: (&contact.jc * &state.qdot)[0],
            constraint_rate,
        });

        if k == steps {
            energy.last = mechanical_energy(model, &state)?;
            break;
        }

        // zero-order hold on the torque over the plant substeps
        let substeps = setup.plant.substeps.max(1);
        let h = dt / substeps as f64;
        let mut sub = fwd;
        let mut next = state.clone();
        for i in 0..substeps {
            if i > 0 {
                sub = constrained_forward_dynamics(model, &next, &u.tau, Some(&setup.plane), &setup.plant)
                    .map_err(sim_err)?;
            }
                let after = step(&next, &sub.qddot, h).map_err(sim_err)?;
            // trapezoidal work of the forces held over this substep
            let qd_mid = (&next.qdot + &after.qdot) * 0.5;
            let (jv, jc) = probe_jacobians(model, &next.q)?;
            let vmid = &jv * &qd_mid;
            energy.actuator_work += u.tau.dot(&qd_mid) * h;
            energy.friction_work += sub.friction.dot(&Vector3::new(vmid[0], vmid[1], vmid[2])) * h;
            energy.contact_work += sub.force * (&jc * &qd_mid)[0] * h;
            next = after;
        }

        state = next;
        measured[0] = sub.force;
    }

    Ok(TrajectoryLog {
        dof: n,
        dt,
        records,
        events,
        energy,
    })
}

/// Runs a line-sweep scenario.
pub fn run_scenario(scn: &Scenario) -> Result<TrajectoryLog> {
    scn.sweep.force.validate()?;
    if !(scn.sweep.speed >= 0.0) {
        return Err(Error::Config("sweep speed must be nonnegative".into()));
    }
    let mut source = scn.sweep.clone();
    run_closed_loop(&scn.setup, &mut source)
}
