//! Heatmap-driven reference generation for surface scans.
//!
//! A detector reports the image column of the spinous process; the image's
//! horizontal axis runs along the probe's second axis, so the distance from
//! the image centre becomes a lateral velocity along that axis. The probe
//! advances at constant speed along the sweep direction, points into the
//! surface, and presses with a force looked up from the subject's BMI.
//!
//! [`synthetic_heatmap`] renders a Gaussian bump from a known [`SpineCurve`]
//! in place of a learned detector, which makes the closed loop testable.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::EndEffectorPose;
use crate::simulator::{self, CartesianReference, LoopSetup, ReferenceSource, Scenario, TrajectoryLog};
use crate::{Error, Result};

/// Default longitudinal scan speed (m/s).
pub const DEFAULT_SCAN_SPEED: f64 = 0.003;

/// Image size and the physical width it covers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    /// Physical extent of the image width (m).
    pub aperture: f64,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            aperture: 0.08,
        }
    }
}

impl ImageGeometry {
    pub fn px_to_m(&self) -> f64 {
        self.aperture / self.width as f64
    }

    pub fn center(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if !(self.aperture > 0.0) {
            return Err(Error::Validation("aperture must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major nonnegative intensity map with a detection confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    confidence: f64,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, confidence: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("heatmap dimensions must be positive".into()));
        }
        crate::error::check_len("heatmap values", width * height, values.len())?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("heatmap values must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Validation(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
            confidence,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::Validation("heatmap values must be finite and nonnegative".into()));
        }
        self.values[row * self.width + col] = value;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Image column of the detected process (px).
    pub u_px: f64,
    pub confidence: f64,
}

/// Column of the global maximum. Ties are broken by the centroid column of
/// all maximal pixels; an all-zero map yields the centre with confidence 0.
pub fn detect_spinous(hm: &Heatmap) -> Detection {
    let max = hm.values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Detection {
            u_px: hm.width as f64 / 2.0,
            confidence: 0.0,
        };
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &v) in hm.values.iter().enumerate() {
        if v == max {
            sum += (i % hm.width) as f64;
            count += 1;
        }
    }
    Detection {
        u_px: sum / count as f64,
        confidence: hm.confidence,
    }
}

/// Lateral velocity `gain * px_to_m * (u - width/2)`, clamped to `±v_max`.
pub fn lateral_reference(u_px: f64, image_width: usize, px_to_m: f64, gain: f64, v_max: f64) -> Result<f64> {
    if !(gain > 0.0) {
        return Err(Error::Validation(format!("lateral gain must be positive, got {gain}")));
    }
    if !(v_max > 0.0) || !(px_to_m > 0.0) {
        return Err(Error::Validation("lateral limit and pixel size must be positive".into()));
    }
    let v = gain * px_to_m * (u_px - image_width as f64 / 2.0);
    Ok(v.clamp(-v_max, v_max))
}

/// Longitudinal scan speed; constant over time.
pub fn sweep_reference(speed: f64, _t: f64) -> f64 {
    speed
}

/// Desired probe orientation: third axis along `-normal`, first axis along
/// the negated tangential part of `sweep_dir`, second axis completing the
/// right-handed frame.
pub fn surface_normal_orientation(normal: &Vector3<f64>, sweep_dir: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if (normal.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("surface normal must be unit length, |n| = {}", normal.norm())));
    }
    let tangential = sweep_dir - normal * normal.dot(sweep_dir);
    if tangential.norm() <= 1e-9 * sweep_dir.norm().max(1.0) {
        return Err(Error::Validation("sweep direction is parallel to the surface normal".into()));
    }
    let z = -normal;
    let x = -tangential.normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Piecewise-linear BMI to force lookup through `(bmi, force)` anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceAnchors {
    pub points: Vec<(f64, f64)>,
}

/// BMI of the default subject, mapped to the middle anchor.
pub const DEFAULT_BMI: f64 = 23.0;

impl Default for ForceAnchors {
    fn default() -> Self {
        Self {
            points: vec![(18.0, 7.0), (DEFAULT_BMI, 10.0), (30.0, 15.0)],
        }
    }
}

impl ForceAnchors {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Validation("at least one force anchor is required".into()));
        }
        if self.points.iter().any(|&(b, f)| !(b > 0.0 && f > 0.0 && b.is_finite() && f.is_finite())) {
            return Err(Error::Validation("force anchors must have positive BMI and force".into()));
        }
        if self.points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Validation("force anchor BMIs must increase strictly".into()));
        }
        Ok(())
    }
}

/// Desired contact force (N) for a subject of the given BMI, held constant
/// outside the anchor range.
pub fn force_reference(bmi: f64, anchors: &ForceAnchors) -> Result<f64> {
    if !(bmi > 0.0) || !bmi.is_finite() {
        return Err(Error::Validation(format!("BMI must be positive, got {bmi}")));
    }
    anchors.validate()?;
    Ok(simulator::interpolate(&anchors.points, bmi))
}

/// Lateral offset of the spine as a function of distance along the sweep.
#[derive(Clone, Debug, PartialEq)]
pub enum SpineShape {
    Straight,
    Sinusoid { amplitude: f64, wavelength: f64, phase: f64 },
    /// `(s, offset)` knots in metres, linear in between, held at the ends.
    Polyline(Vec<(f64, f64)>),
}

impl SpineShape {
    pub fn offset(&self, s: f64) -> f64 {
        match self {
            SpineShape::Straight => 0.0,
            SpineShape::Sinusoid {
                amplitude,
                wavelength,
                phase,
            } => amplitude * (2.0 * std::f64::consts::PI * s / wavelength + phase).sin(),
            SpineShape::Polyline(knots) => simulator::interpolate(knots, s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpineShape::Straight => Ok(()),
            SpineShape::Sinusoid {
                amplitude,
                wavelength,
                phase,
            } => {
                if !(wavelength > &0.0) || !amplitude.is_finite() || !phase.is_finite() {
                    Err(Error::Validation("sinusoid needs a positive wavelength".into()))
                } else {
                    Ok(())
                }
            }
            SpineShape::Polyline(knots) => {
                if knots.is_empty() || knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                    Err(Error::Validation("polyline knots must be nonempty with increasing s".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Ground-truth spine on a planar surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SpineCurve {
    pub shape: SpineShape,
    /// Spine point at `s = 0` (m).
    pub origin: Vector3<f64>,
    /// Unit sweep direction in the surface.
    pub sweep_dir: Vector3<f64>,
    /// Unit surface normal pointing out of the surface.
    pub normal: Vector3<f64>,
}

impl SpineCurve {
    pub fn new(shape: SpineShape, origin: Vector3<f64>, sweep_dir: Vector3<f64>, normal: Vector3<f64>) -> Result<Self> {
        shape.validate()?;
        if (sweep_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("sweep direction must be unit length".into()));
        }
        if normal.dot(&sweep_dir).abs() > 1e-9 {
            return Err(Error::Validation("sweep direction must lie in the surface".into()));
        }
        surface_normal_orientation(&normal, &sweep_dir)?;
        Ok(Self {
            shape,
            origin,
            sweep_dir,
            normal,
        })
    }

    /// Probe orientation for the scan.
    pub fn probe_rotation(&self) -> Matrix3<f64> {
        surface_normal_orientation(&self.normal, &self.sweep_dir).expect("validated on construction")
    }

    /// In-surface axis perpendicular to the sweep, along which offsets are measured.
    pub fn lateral_axis(&self) -> Vector3<f64> {
        self.probe_rotation().column(1).into_owned()
    }

    pub fn point(&self, s: f64) -> Vector3<f64> {
        self.origin + self.sweep_dir * s + self.lateral_axis() * self.shape.offset(s)
    }

    /// Distance along the sweep of the foot of `p`.
    pub fn station(&self, p: &Vector3<f64>) -> f64 {
        (p - self.origin).dot(&self.sweep_dir)
    }
}

/// Rendering parameters of the synthetic detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderParams {
    pub geometry: ImageGeometry,
    /// Bump width across columns (px).
    pub sigma_cols: f64,
    /// Bump height across rows (px).
    pub sigma_rows: f64,
    /// Standard deviation of the additive noise.
    pub noise_std: f64,
    /// Length over which confidence decays once the spine leaves the aperture (m).
    pub confidence_decay: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            geometry: ImageGeometry::default(),
            sigma_cols: 4.0,
            sigma_rows: 4.0,
            noise_std: 0.0,
            confidence_decay: 0.01,
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if !(self.sigma_cols > 0.0 && self.sigma_rows > 0.0 && self.confidence_decay > 0.0) {
            return Err(Error::Validation("bump widths and confidence decay must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Validation("noise level must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Signed offset (m) of the spine from the probe along the image axis.
pub fn spine_offset(curve: &SpineCurve, probe: &EndEffectorPose) -> f64 {
    let s = curve.station(&probe.position);
    let axis = probe.rotation.column(1);
    (curve.point(s) - probe.position).dot(&axis)
}

/// Renders the spine under the probe as a Gaussian bump with seeded noise.
pub fn synthetic_heatmap(curve: &SpineCurve, probe: &EndEffectorPose, params: &RenderParams, noise_seed: u64) -> Result<Heatmap> {
    params.validate()?;
    let g = params.geometry;
    let d = spine_offset(curve, probe);
    let u0 = g.center() + d / g.px_to_m();
    let r0 = g.height as f64 / 2.0;
    let cols: Vec<f64> = (0..g.width)
        .map(|c| (-(c as f64 - u0).powi(2) / (2.0 * params.sigma_cols.powi(2))).exp())
        .collect();
    let rows: Vec<f64> = (0..g.height)
        .map(|r| (-(r as f64 - r0).powi(2) / (2.0 * params.sigma_rows.powi(2))).exp())
        .collect();
    let mut values = Vec::with_capacity(g.width * g.height);
    for r in &rows {
        values.extend(cols.iter().map(|c| r * c));
    }
    if params.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, params.noise_std).map_err(|e| Error::Validation(e.to_string()))?;
        for v in values.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }
    let half = g.aperture / 2.0;
    let confidence = if d.abs() <= half {
        1.0
    } else {
        (-(d.abs() - half) / params.confidence_decay).exp()
    };
    Heatmap::new(g.width, g.height, values, confidence)
}

/// Holds the last lateral command through low-confidence frames and lets
/// it decay exponentially.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutHold {
    pub threshold: f64,
    /// Decay time constant (s).
    pub tau: f64,
    last: f64,
    since: Option<f64>,
}

impl Default for DropoutHold {
    fn default() -> Self {
        Self::new(0.5, 0.5)
    }
}

impl DropoutHold {
    pub fn new(threshold: f64, tau: f64) -> Self {
        Self {
            threshold,
            tau,
            last: 0.0,
            since: None,
        }
    }

    /// Command to apply at `t` given a fresh command and its confidence.
    pub fn update(&mut self, t: f64, command: f64, confidence: f64) -> f64 {
        if confidence >= self.threshold {
            self.last = command;
            self.since = None;
            return command;
        }
        let t0 = *self.since.get_or_insert(t);
        self.last * (-(t - t0) / self.tau).exp()
    }

    pub fn holding(&self) -> bool {
        self.since.is_some()
    }
}

/// Scan parameters on a planar surface.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams {
    pub curve: SpineCurve,
    pub speed: f64,
    /// Heatmap update rate (Hz).
    pub frame_rate: f64,
    /// Pixel-deviation to lateral-velocity gain (1/s).
    pub gain: f64,
    pub v_lat_max: f64,
    pub render: RenderParams,
    pub dropout_threshold: f64,
    pub dropout_tau: f64,
    /// Desired contact force (N).
    pub force: f64,
    pub seed: u64,
}

impl ScanParams {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if !(self.speed >= 0.0) || !(self.frame_rate > 0.0) || !(self.force > 0.0) {
            return Err(Error::Config("scan speed, frame rate and force must be positive".into()));
        }
        if !(self.gain > 0.0) || !(self.v_lat_max > 0.0) || !(self.dropout_tau > 0.0) {
            return Err(Error::Config("lateral gain, limit and dropout time constant must be positive".into()));
        }
        Ok(())
    }
}

/// One processed heatmap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanFrame {
    pub t: f64,
    pub u_px: f64,
    /// Detected column minus the image centre (px).
    pub deviation_px: f64,
    /// Ground-truth offset of the spine in pixels.
    pub true_deviation_px: f64,
    pub confidence: f64,
    /// Lateral velocity command after the dropout policy (m/s).
    pub command: f64,
}

/// Reference source that steers laterally from synthetic heatmaps.
#[derive(Clone, Debug)]
pub struct ScanSource {
    params: ScanParams,
    rotation: Matrix3<f64>,
    lateral: Vector3<f64>,
    start: Vector3<f64>,
    lateral_position: f64,
    command: f64,
    last_t: f64,
    next_frame: f64,
    frame_index: u64,
    hold: DropoutHold,
    frames: Vec<ScanFrame>,
}

impl ScanSource {
    pub fn new(params: ScanParams) -> Result<Self> {
        params.validate()?;
        let rotation = params.curve.probe_rotation();
        Ok(Self {
            lateral: rotation.column(1).into_owned(),
            start: params.curve.origin,
            rotation,
            lateral_position: 0.0,
            command: 0.0,
            last_t: 0.0,
            next_frame: 1.0 / params.frame_rate,
            frame_index: 0,
            hold: DropoutHold::new(params.dropout_threshold, params.dropout_tau),
            frames: Vec::new(),
            params,
        })
    }

    pub fn frames(&self) -> &[ScanFrame] {
        &self.frames
    }

    fn process_frame(&mut self, t: f64, probe: &EndEffectorPose) -> Result<()> {
        let p = &self.params;
        let g = p.render.geometry;
        let seed = p.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.frame_index);
        let hm = synthetic_heatmap(&p.curve, probe, &p.render, seed)?;
        let det = detect_spinous(&hm);
        let raw = lateral_reference(det.u_px, g.width, g.px_to_m(), p.gain, p.v_lat_max)?;
        self.command = self.hold.update(t, raw, det.confidence);
        self.frames.push(ScanFrame {
            t,
            u_px: det.u_px,
            deviation_px: det.u_px - g.center(),
            true_deviation_px: spine_offset(&p.curve, probe) / g.px_to_m(),
            confidence: det.confidence,
            command: self.command,
        });
        self.frame_index += 1;
        Ok(())
    }
}

impl ReferenceSource for ScanSource {
    fn sample(&mut self, t: f64, measured: &EndEffectorPose) -> Result<CartesianReference> {
        if t > self.last_t {
            self.lateral_position += self.command * (t - self.last_t);
            self.last_t = t;
        }
        if t + 1e-9 >= self.next_frame {
            self.process_frame(t, measured)?;
            self.next_frame += 1.0 / self.params.frame_rate;
        }
        let speed = sweep_reference(self.params.speed, t);
        let sweep = self.params.curve.sweep_dir;
        Ok(CartesianReference {
            position: self.start + sweep * (speed * t.max(0.0)) + self.lateral * self.lateral_position,
            velocity: sweep * speed + self.lateral * self.command,
            acceleration: Vector3::zeros(),
            rotation: self.rotation,
            force: self.params.force,
        })
    }
}

/// A closed-loop scan: robot loop settings plus guidance parameters.
#[derive(Clone, Debug)]
pub struct ScanSetup {
    pub setup: LoopSetup,
    pub scan: ScanParams,
}

impl ScanSetup {
    /// Scan over a planar back at `x = 0.6` from `(0.6, 0, 0.66)` upward,
    /// 10 N contact, 20 s at the default speed.
    pub fn planar_back(shape: SpineShape) -> Result<Self> {
        let mut setup = Scenario::board_sweep(simulator::ForceProfile::Step { value: 10.0 }).setup;
        setup.duration = 20.0;
        let curve = SpineCurve::new(shape, Vector3::new(0.6, 0.0, 0.66), Vector3::z(), -Vector3::x())?;
        Ok(Self {
            setup,
            scan: ScanParams {
                curve,
                speed: DEFAULT_SCAN_SPEED,
                frame_rate: 10.0,
                gain: 8.0,
                v_lat_max: 0.02,
                render: RenderParams::default(),
                dropout_threshold: 0.5,
                dropout_tau: 0.5,
                force: force_reference(DEFAULT_BMI, &ForceAnchors::default())?,
                seed: 0,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct ScanReport {
    pub log: TrajectoryLog,
    pub frames: Vec<ScanFrame>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct CenteringStats {
    pub frames: usize,
    pub max_abs_deviation_px: f64,
    pub rms_deviation_px: f64,
    pub max_abs_command: f64,
}

impl ScanReport {
    /// Detected-deviation statistics over frames at or after `transient`.
    pub fn centering(&self, transient: f64) -> CenteringStats {
        let sel: Vec<&ScanFrame> = self.frames.iter().filter(|f| f.t >= transient).collect();
        let n = sel.len();
        let max_dev = sel.iter().map(|f| f.deviation_px.abs()).fold(0.0, f64::max);
        let rms = if n > 0 {
            (sel.iter().map(|f| f.deviation_px.powi(2)).sum::<f64>() / n as f64).sqrt()
        } else {
            0.0
        };
        CenteringStats {
            frames: n,
            max_abs_deviation_px: max_dev,
            rms_deviation_px: rms,
            max_abs_command: sel.iter().map(|f| f.command.abs()).fold(0.0, f64::max),
        }
    }
}

/// Runs the scan through the full closed loop.
pub fn run_scan(setup: &ScanSetup) -> Result<ScanReport> {
    let mut source = ScanSource::new(setup.scan.clone())?;
    let log = simulator::run_closed_loop(&setup.setup, &mut source)?;
    Ok(ScanReport {
        log,
        frames: source.frames,
    })
}
