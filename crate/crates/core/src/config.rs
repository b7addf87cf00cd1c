//! Configuration files.
//!
//! Experiment configs, robot descriptions, QP problems and stiffness
//! schedules are TOML documents with units spelled out in key names. Unknown
//! keys are rejected and every error names the offending key path. Relative
//! paths inside a config resolve against the config's own directory.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::contact::{FrictionModel, WrenchBases};
use crate::dynamics::{Joint, Link, RobotModel, Transform};
use crate::guidance::{ForceAnchors, ImageGeometry, RenderParams, ScanParams, ScanSetup, SpineCurve, SpineShape};
use crate::impedance::{EmOptions, LearnOptions, StiffnessSchedule};
use crate::inner_loop::{ConstraintForm, InputBounds, TaskWeights};
use crate::outer_loop::{GainSet, TaskLayout};
use crate::qp::{QpOptions, QpProblem};
use crate::simulator::{ForceProfile, LineSweep, LoopSetup, Plane, PlantParams, Scenario};
use crate::{so3, Error, Result};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses TOML text, reporting the key path of the first failure.
pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim_end().to_string();
        if path.is_empty() || path == "." {
            Error::Config(format!("{origin}: {msg}"))
        } else {
            Error::Config(format!("{origin}: at `{path}`: {msg}"))
        }
    })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?, &path.display().to_string())
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(format!("serialization failed: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

/// Top-level experiment configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Seed for every random choice in the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robot: Option<RobotSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<ContactSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impedance: Option<ImpedanceSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    /// Robot description file.
    pub file: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactSection {
    pub board_point_m: [f64; 3],
    /// Unit normal pointing from the board toward the robot.
    pub board_normal: [f64; 3],
    pub friction_mu: f64,
    pub viscous_friction_ns_per_m: f64,
    pub baumgarte_alpha_per_s: f64,
    pub baumgarte_beta_per_s: f64,
    pub plant_substeps: usize,
}

impl Default for ContactSection {
    fn default() -> Self {
        let plant = PlantParams::default();
        Self {
            board_point_m: [0.6, 0.0, 0.0],
            board_normal: [-1.0, 0.0, 0.0],
            friction_mu: 0.5,
            viscous_friction_ns_per_m: plant.friction.viscous,
            baumgarte_alpha_per_s: plant.baumgarte_alpha,
            baumgarte_beta_per_s: plant.baumgarte_beta,
            plant_substeps: plant.substeps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsSection {
    pub joint_kp_per_s2: f64,
    pub joint_kd_per_s: f64,
    pub position_kp_per_s2: f64,
    pub position_kd_per_s: f64,
    pub orientation_kp_per_s2: f64,
    pub orientation_kd_per_s: f64,
    pub force_kp: f64,
    pub force_ki_per_s: f64,
    /// Clamp on the integrated force error (N s).
    pub force_integral_clamp_ns: f64,
    /// Learned stiffness schedule replacing the position and orientation gains.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule_file: Option<PathBuf>,
}

impl Default for GainsSection {
    fn default() -> Self {
        let layout = TaskLayout::new(6, &WrenchBases::probe_axis()).expect("probe-axis layout");
        let g = GainSet::scenario_default(&layout);
        Self {
            joint_kp_per_s2: g.kq_p[0],
            joint_kd_per_s: g.kq_d[0],
            position_kp_per_s2: g.ku_p[0],
            position_kd_per_s: g.ku_d[0],
            orientation_kp_per_s2: g.kr_p[0],
            orientation_kd_per_s: g.kr_d[0],
            force_kp: g.kc_p[0],
            force_ki_per_s: g.kc_i[0],
            force_integral_clamp_ns: g.integral_clamp,
            schedule_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub joint: f64,
    pub position: f64,
    pub orientation: f64,
    pub force: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let [joint, position, orientation, force] = TaskWeights::default().0;
        Self {
            joint,
            position,
            orientation,
            force,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub torque_max_nm: f64,
    pub force_min_n: f64,
    pub force_max_n: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            torque_max_nm: 50.0,
            force_min_n: 0.0,
            force_max_n: 60.0,
        }
    }
}

/// Desired contact force over time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceSection {
    Sinusoid { amplitude_n: f64, period_s: f64, offset_n: f64 },
    Step { value_n: f64 },
    Schedule { knots_s_n: Vec<[f64; 2]> },
}

impl ForceSection {
    pub fn profile(&self) -> ForceProfile {
        match self {
            ForceSection::Sinusoid {
                amplitude_n,
                period_s,
                offset_n,
            } => ForceProfile::Sinusoid {
                amplitude: *amplitude_n,
                period: *period_s,
                offset: *offset_n,
            },
            ForceSection::Step { value_n } => ForceProfile::Step { value: *value_n },
            ForceSection::Schedule { knots_s_n } => ForceProfile::Schedule(knots_s_n.iter().map(|k| (k[0], k[1])).collect()),
        }
    }

    /// Parses a command-line override: `step:F`, `sine:A,P,O` or
    /// `schedule:t0=f0,t1=f1,...` (N and s).
    pub fn parse_override(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid force override `{s}`; expected step:F, sine:A,P,O or schedule:t=f,..."));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let nums = |text: &str| -> Result<Vec<f64>> { text.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect() };
        let section = match kind.trim() {
            "step" => {
                let v = nums(rest)?;
                if v.len() != 1 {
                    return Err(bad());
                }
                ForceSection::Step { value_n: v[0] }
            }
            "sine" | "sinusoid" => {
                let v = nums(rest)?;
                if v.len() != 3 {
                    return Err(bad());
                }
                ForceSection::Sinusoid {
                    amplitude_n: v[0],
                    period_s: v[1],
                    offset_n: v[2],
                }
            }
            "schedule" => {
                let knots = rest
                    .split(',')
                    .map(|kv| {
                        let (t, f) = kv.split_once('=').ok_or_else(bad)?;
                        Ok([t.trim().parse().map_err(|_| bad())?, f.trim().parse().map_err(|_| bad())?])
                    })
                    .collect::<Result<Vec<[f64; 2]>>>()?;
                ForceSection::Schedule { knots_s_n: knots }
            }
            _ => return Err(bad()),
        };
        section.profile().validate()?;
        Ok(section)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub duration_s: f64,
    pub control_rate_hz: f64,
    pub press_in_s: f64,
    pub start_m: [f64; 3],
    pub end_m: [f64; 3],
    pub sweep_speed_mps: f64,
    /// Roll-pitch-yaw of the constant desired orientation.
    pub orientation_rpy_rad: [f64; 3],
    pub constraint: ConstraintForm,
    /// Start of the steady-state window for summaries.
    pub transient_s: f64,
    pub qp_tolerance: f64,
    pub qp_max_iterations: usize,
    /// Record the finite-difference constraint-rate check at every step.
    pub check_constraint: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub force: Option<ForceSection>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let qp = QpOptions::default();
        Self {
            duration_s: 6.0,
            control_rate_hz: 1000.0,
            press_in_s: 0.2,
            start_m: [0.6, 0.0, 0.6],
            end_m: [0.6, 0.0, 0.9],
            sweep_speed_mps: 0.05,
            orientation_rpy_rad: [0.0, std::f64::consts::FRAC_PI_2, 0.0],
            constraint: ConstraintForm::Differentiated,
            transient_s: 0.5,
            qp_tolerance: qp.tol,
            qp_max_iterations: qp.max_iter,
            check_constraint: false,
            force: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpineSection {
    Straight,
    Sinusoid { amplitude_m: f64, wavelength_m: f64, phase_rad: f64 },
    Polyline { knots_m: Vec<[f64; 2]> },
}

impl SpineSection {
    pub fn shape(&self) -> SpineShape {
        match self {
            SpineSection::Straight => SpineShape::Straight,
            SpineSection::Sinusoid {
                amplitude_m,
                wavelength_m,
                phase_rad,
            } => SpineShape::Sinusoid {
                amplitude: *amplitude_m,
                wavelength: *wavelength_m,
                phase: *phase_rad,
            },
            SpineSection::Polyline { knots_m } => SpineShape::Polyline(knots_m.iter().map(|k| (k[0], k[1])).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub spine: SpineSection,
    pub spine_origin_m: [f64; 3],
    pub sweep_direction: [f64; 3],
    /// Unit surface normal pointing out of the back.
    pub surface_normal: [f64; 3],
    pub scan_speed_mps: f64,
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    pub lateral_gain_per_s: f64,
    pub lateral_speed_max_mps: f64,
    pub image_width_px: usize,
    pub image_height_px: usize,
    pub aperture_m: f64,
    pub bump_sigma_cols_px: f64,
    pub bump_sigma_rows_px: f64,
    pub noise_std: f64,
    pub confidence_decay_m: f64,
    pub dropout_confidence: f64,
    pub dropout_tau_s: f64,
    pub subject_bmi: f64,
    /// `(BMI, force in N)` anchors of the force lookup.
    pub force_anchors_bmi_n: Vec<[f64; 2]>,
    pub transient_s: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let s = ScanSetup::planar_back(SpineShape::Straight).expect("built-in scan is valid");
        let p = s.scan;
        Self {
            spine: SpineSection::Straight,
            spine_origin_m: p.curve.origin.into(),
            sweep_direction: p.curve.sweep_dir.into(),
            surface_normal: p.curve.normal.into(),
            scan_speed_mps: p.speed,
            duration_s: s.setup.duration,
            frame_rate_hz: p.frame_rate,
            lateral_gain_per_s: p.gain,
            lateral_speed_max_mps: p.v_lat_max,
            image_width_px: p.render.geometry.width,
            image_height_px: p.render.geometry.height,
            aperture_m: p.render.geometry.aperture,
            bump_sigma_cols_px: p.render.sigma_cols,
            bump_sigma_rows_px: p.render.sigma_rows,
            noise_std: p.render.noise_std,
            confidence_decay_m: p.render.confidence_decay,
            dropout_confidence: p.dropout_threshold,
            dropout_tau_s: p.dropout_tau,
            subject_bmi: crate::guidance::DEFAULT_BMI,
            force_anchors_bmi_n: ForceAnchors::default().points.iter().map(|&(b, f)| [b, f]).collect(),
            transient_s: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpedanceSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub demos_dir: Option<PathBuf>,
    pub components: usize,
    pub em_tolerance: f64,
    pub em_max_iterations: usize,
    pub stiffness_min: f64,
    pub stiffness_max: f64,
    /// Stiffness given to the median retrieved variance of each channel group.
    pub target_gain: f64,
    pub schedule_samples: usize,
}

impl Default for ImpedanceSection {
    fn default() -> Self {
        let o = LearnOptions::default();
        Self {
            demos_dir: None,
            components: o.components,
            em_tolerance: o.em.tol,
            em_max_iterations: o.em.max_iter,
            stiffness_min: o.k_min,
            stiffness_max: o.k_max,
            target_gain: o.target_gain,
            schedule_samples: o.samples,
        }
    }
}

/// A parsed config with the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let file: ConfigFile = load_toml(path)?;
        Ok(Self {
            file,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn robot(&self) -> Result<RobotDescription> {
        let section = self
            .file
            .robot
            .as_ref()
            .ok_or_else(|| Error::Config("missing [robot] section".into()))?;
        let path = self.resolve(&section.file);
        if !path.is_file() {
            return Err(Error::Config(format!("robot.file: {} does not exist", path.display())));
        }
        RobotDescription::load(&path)
    }

    fn schedule(&self) -> Result<Option<StiffnessSchedule>> {
        match self.file.gains.as_ref().and_then(|g| g.schedule_file.as_ref()) {
            Some(p) => Ok(Some(ScheduleFile::load(&self.resolve(p))?.schedule()?)),
            None => Ok(None),
        }
    }

    /// Closed-loop settings shared by `simulate` and `scan`.
    pub fn loop_setup(&self) -> Result<LoopSetup> {
        let robot = self.robot()?;
        let model = robot.model()?;
        let n = model.dof();
        let contact = self.file.contact.clone().unwrap_or_default();
        let gains = self.file.gains.clone().unwrap_or_default();
        let weights = self.file.weights.clone().unwrap_or_default();
        let bounds = self.file.bounds.clone().unwrap_or_default();
        let scenario = self.file.scenario.clone().unwrap_or_default();

        let layout = TaskLayout::new(n, &WrenchBases::probe_axis())?;
        let mut gain_set = GainSet::uniform(
            &layout,
            (gains.joint_kp_per_s2, gains.joint_kd_per_s),
            (gains.position_kp_per_s2, gains.position_kd_per_s),
            (gains.orientation_kp_per_s2, gains.orientation_kd_per_s),
            (gains.force_kp, gains.force_ki_per_s),
            gains.force_integral_clamp_ns,
        );
        gain_set.reset_integral();
        gain_set.validate(&layout).map_err(|e| Error::Config(format!("gains: {e}")))?;
        let task_weights = TaskWeights([weights.joint, weights.position, weights.orientation, weights.force]);
        task_weights.validate().map_err(|e| Error::Config(format!("weights: {e}")))?;
        let input_bounds = InputBounds::symmetric(n, 1, bounds.torque_max_nm, bounds.force_min_n, bounds.force_max_n);
        input_bounds.validate(n + 1).map_err(|e| Error::Config(format!("bounds: {e}")))?;
        let plane = Plane::new(v3(contact.board_point_m), v3(contact.board_normal)).map_err(|e| Error::Config(format!("contact.board_normal: {e}")))?;
        if !(contact.friction_mu >= 0.0) || !(contact.viscous_friction_ns_per_m >= 0.0) {
            return Err(Error::Config("contact: friction coefficients must be nonnegative".into()));
        }
        if contact.plant_substeps == 0 {
            return Err(Error::Config("contact.plant_substeps must be at least 1".into()));
        }
        let q_seed = match &robot.q_seed_rad {
            Some(q) => DVector::from_vec(q.clone()),
            None => DVector::zeros(n),
        };
        crate::error::check_len("robot q_seed_rad", n, q_seed.len()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(LoopSetup {
            plane,
            plant: PlantParams {
                baumgarte_alpha: contact.baumgarte_alpha_per_s,
                baumgarte_beta: contact.baumgarte_beta_per_s,
                friction: FrictionModel {
                    viscous: contact.viscous_friction_ns_per_m,
                },
                substeps: contact.plant_substeps,
            },
            mu: contact.friction_mu,
            duration: scenario.duration_s,
            control_rate: scenario.control_rate_hz,
            press_in: scenario.press_in_s,
            weights: task_weights,
            gains: gain_set,
            bounds: input_bounds,
            constraint: scenario.constraint,
            qp: QpOptions {
                tol: scenario.qp_tolerance,
                max_iter: scenario.qp_max_iterations,
            },
            q_seed,
            stiffness: self.schedule()?,
            check_constraint: scenario.check_constraint,
            robot: model,
        })
    }

    /// Line-sweep scenario for `simulate`.
    pub fn scenario(&self) -> Result<Scenario> {
        let section = self
            .file
            .scenario
            .as_ref()
            .ok_or_else(|| Error::Config("missing [scenario] section".into()))?;
        let force = section
            .force
            .as_ref()
            .ok_or_else(|| Error::Config("scenario.force is required".into()))?;
        let profile = force.profile();
        profile.validate().map_err(|e| Error::Config(format!("scenario.force: {e}")))?;
        Ok(Scenario {
            setup: self.loop_setup()?,
            sweep: LineSweep {
                start: v3(section.start_m),
                end: v3(section.end_m),
                speed: section.sweep_speed_mps,
                rotation: so3::from_rpy(&v3(section.orientation_rpy_rad)),
                force: profile,
            },
            seed: self.file.seed,
        })
    }

    /// Guided scan for `scan`.
    pub fn scan_setup(&self) -> Result<ScanSetup> {
        let g = self
            .file
            .guidance
            .as_ref()
            .ok_or_else(|| Error::Config("missing [guidance] section".into()))?;
        let mut setup = self.loop_setup()?;
        setup.duration = g.duration_s;
        let curve = SpineCurve::new(g.spine.shape(), v3(g.spine_origin_m), v3(g.sweep_direction), v3(g.surface_normal))
            .map_err(|e| Error::Config(format!("guidance: {e}")))?;
        let anchors = ForceAnchors {
            points: g.force_anchors_bmi_n.iter().map(|a| (a[0], a[1])).collect(),
        };
        let force = crate::guidance::force_reference(g.subject_bmi, &anchors).map_err(|e| Error::Config(format!("guidance: {e}")))?;
        let scan = ScanParams {
            curve,
            speed: g.scan_speed_mps,
            frame_rate: g.frame_rate_hz,
            gain: g.lateral_gain_per_s,
            v_lat_max: g.lateral_speed_max_mps,
            render: RenderParams {
                geometry: ImageGeometry {
                    width: g.image_width_px,
                    height: g.image_height_px,
                    aperture: g.aperture_m,
                },
                sigma_cols: g.bump_sigma_cols_px,
                sigma_rows: g.bump_sigma_rows_px,
                noise_std: g.noise_std,
                confidence_decay: g.confidence_decay_m,
            },
            dropout_threshold: g.dropout_confidence,
            dropout_tau: g.dropout_tau_s,
            force,
            seed: self.file.seed,
        };
        scan.validate().map_err(|e| Error::Config(format!("guidance: {e}")))?;
        Ok(ScanSetup { setup, scan })
    }

    pub fn learn_options(&self) -> LearnOptions {
        let s = self.file.impedance.clone().unwrap_or_default();
        LearnOptions {
            components: s.components,
            em: EmOptions {
                tol: s.em_tolerance,
                max_iter: s.em_max_iterations,
                seed: self.file.seed,
            },
            k_min: s.stiffness_min,
            k_max: s.stiffness_max,
            target_gain: s.target_gain,
            samples: s.schedule_samples,
        }
    }
}

/// One joint and the link it drives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointEntry {
    /// Joint frame in the previous link frame.
    pub translation_m: [f64; 3],
    #[serde(default)]
    pub rpy_rad: [f64; 3],
    pub axis: [f64; 3],
    pub mass_kg: f64,
    /// Centre of mass in the link frame.
    pub com_m: [f64; 3],
    /// Inertia about the centre of mass, rows of a symmetric 3x3 matrix.
    pub inertia_kgm2: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolEntry {
    pub translation_m: [f64; 3],
    #[serde(default)]
    pub rpy_rad: [f64; 3],
}

/// Robot description file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotDescription {
    pub name: String,
    pub gravity_mps2: [f64; 3],
    /// Seed configuration for the initial inverse kinematics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_seed_rad: Option<Vec<f64>>,
    pub tool: ToolEntry,
    pub joints: Vec<JointEntry>,
}

fn transform(t: [f64; 3], rpy: [f64; 3]) -> Transform {
    Transform {
        rotation: so3::from_rpy(&v3(rpy)),
        translation: v3(t),
    }
}

impl RobotDescription {
    pub fn load(path: &Path) -> Result<Self> {
        load_toml(path)
    }

    pub fn model(&self) -> Result<RobotModel> {
        let joints = self
            .joints
            .iter()
            .map(|j| Joint {
                offset: transform(j.translation_m, j.rpy_rad),
                axis: v3(j.axis),
            })
            .collect();
        let links = self
            .joints
            .iter()
            .map(|j| Link {
                mass: j.mass_kg,
                com: v3(j.com_m),
                inertia: Matrix3::from_fn(|r, c| j.inertia_kgm2[r][c]),
            })
            .collect();
        RobotModel::new(joints, links, v3(self.gravity_mps2), transform(self.tool.translation_m, self.tool.rpy_rad))
            .map_err(|e| Error::Config(format!("robot `{}`: {e}", self.name)))
    }
}

/// Learned stiffness schedule on disk; damping is recomputed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub stiffness_min: f64,
    pub stiffness_max: f64,
    pub times_s: Vec<f64>,
    /// One row of per-channel stiffness per time.
    pub stiffness: Vec<Vec<f64>>,
}

impl ScheduleFile {
    pub fn from_schedule(s: &StiffnessSchedule) -> Self {
        Self {
            stiffness_min: s.k_min,
            stiffness_max: s.k_max,
            times_s: s.times.clone(),
            stiffness: s.kp.iter().map(|k| k.iter().copied().collect()).collect(),
        }
    }

    pub fn schedule(&self) -> Result<StiffnessSchedule> {
        let d = self.stiffness.first().map_or(0, Vec::len);
        if d != 6 || self.stiffness.iter().any(|r| r.len() != d) {
            return Err(Error::Config("stiffness rows must hold six channels (position then orientation)".into()));
        }
        StiffnessSchedule::new(
            self.times_s.clone(),
            self.stiffness.iter().map(|r| DVector::from_vec(r.clone())).collect(),
            self.stiffness_min,
            self.stiffness_max,
        )
        .map_err(|e| Error::Config(format!("stiffness schedule: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_toml(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &to_toml(self)?)
    }
}

/// QP problem file for `qp-check`. Matrices are lists of rows; absent
/// constraint blocks are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpFile {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    #[serde(default)]
    pub l: Vec<Vec<f64>>,
    #[serde(default)]
    pub h: Vec<f64>,
    #[serde(default)]
    pub d: Vec<Vec<f64>>,
    #[serde(default)]
    pub z: Vec<f64>,
    #[serde(default = "default_tol")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iterations: usize,
}

fn default_tol() -> f64 {
    QpOptions::default().tol
}

fn default_max_iter() -> usize {
    QpOptions::default().max_iter
}

fn matrix(name: &str, rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("{name}: every row needs {cols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl QpFile {
    pub fn load(path: &Path) -> Result<Self> {
        load_toml(path)
    }

    pub fn problem(&self) -> Result<(QpProblem, QpOptions)> {
        let dim = self.q.len();
        let p = matrix("p", &self.p, dim)?;
        if p.nrows() != dim {
            return Err(Error::Config(format!("p: expected {dim} rows")));
        }
        let l = matrix("l", &self.l, dim)?;
        let d = matrix("d", &self.d, dim)?;
        let prob = QpProblem::new(
            p,
            DVector::from_vec(self.q.clone()),
            l,
            DVector::from_vec(self.h.clone()),
            d,
            DVector::from_vec(self.z.clone()),
        )
        .map_err(|e| Error::Config(format!("qp problem: {e}")))?;
        Ok((
            prob,
            QpOptions {
                tol: self.tolerance,
                max_iter: self.max_iterations,
            },
        ))
    }
}

/// Demonstration set description: CSV files relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoManifest {
    pub sample_period_s: f64,
    pub files: Vec<PathBuf>,
}

impl DemoManifest {
    pub fn load(path: &Path) -> Result<Self> {
        load_toml(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &to_toml(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_report_their_path() {
        let err = parse_toml::<ConfigFile>("[gains]\nforce_kp = 1.0\nforce_kpp = 2.0\n", "test").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gains"), "{msg}");
        assert!(msg.contains("force_kpp"), "{msg}");
        let err = parse_toml::<ConfigFile>("[scenario]\nduration_s = \"six\"\n", "test").unwrap_err();
        assert!(err.to_string().contains("scenario.duration_s"), "{err}");
    }

    #[test]
    fn tagged_force_sections() {
        let c: ConfigFile = parse_toml(
            "[scenario.force]\nprofile = \"sinusoid\"\namplitude_n = 5.0\nperiod_s = 6.0\noffset_n = 10.0\n",
            "test",
        )
        .unwrap();
        let f = c.scenario.unwrap().force.unwrap();
        assert_eq!(
            f.profile(),
            ForceProfile::Sinusoid {
                amplitude: 5.0,
                period: 6.0,
                offset: 10.0
            }
        );
        assert!(parse_toml::<ConfigFile>("[scenario.force]\nprofile = \"step\"\nvalue_n = 1.0\nextra = 2\n", "test").is_err());
    }

    #[test]
    fn force_overrides() {
        assert_eq!(ForceSection::parse_override("step:15").unwrap(), ForceSection::Step { value_n: 15.0 });
        assert_eq!(
            ForceSection::parse_override("sine:5,6,10").unwrap(),
            ForceSection::Sinusoid {
                amplitude_n: 5.0,
                period_s: 6.0,
                offset_n: 10.0
            }
        );
        assert_eq!(
            ForceSection::parse_override("schedule:0=5,1=7").unwrap(),
            ForceSection::Schedule {
                knots_s_n: vec![[0.0, 5.0], [1.0, 7.0]]
            }
        );
        for bad in ["step", "step:x", "sine:1,2", "ramp:3", "schedule:1"] {
            assert!(ForceSection::parse_override(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn default_sections_round_trip() {
        let c = ConfigFile {
            seed: 3,
            robot: Some(RobotSection { file: "robots/arm6.toml".into() }),
            contact: Some(ContactSection::default()),
            gains: Some(GainsSection::default()),
            weights: Some(WeightsSection::default()),
            bounds: Some(BoundsSection::default()),
            scenario: Some(ScenarioSection {
                force: Some(ForceSection::Step { value_n: 15.0 }),
                ..Default::default()
            }),
            guidance: Some(GuidanceSection::default()),
            impedance: Some(ImpedanceSection::default()),
        };
        let text = to_toml(&c).unwrap();
        let back: ConfigFile = parse_toml(&text, "round trip").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn default_orientation_is_the_board_rotation() {
        let r = so3::from_rpy(&v3(ScenarioSection::default().orientation_rpy_rad));
        assert!((r - crate::simulator::board_rotation()).amax() < 1e-15);
    }

    #[test]
    fn qp_file_dimensions() {
        let f: QpFile = parse_toml("p = [[1.0, 0.0], [0.0, 1.0]]\nq = [0.0, 0.0]\nl = [[-1.0, 0.0]]\nh = [-1.0]\n", "qp").unwrap();
        let (prob, _) = f.problem().unwrap();
        assert_eq!(prob.dim(), 2);
        let bad: QpFile = parse_toml("p = [[1.0, 0.0]]\nq = [0.0, 0.0]\n", "qp").unwrap();
        assert!(bad.problem().is_err());
    }
}
