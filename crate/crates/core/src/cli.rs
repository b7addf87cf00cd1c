//! Subcommands behind the `hybridctl` binary.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 divergence during simulation, 4 infeasible QP in `qp-check`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{DemoManifest, ForceSection, LoadedConfig, QpFile, ScheduleFile};
use crate::guidance::{run_scan, CenteringStats, ScanFrame};
use crate::impedance::{learn, read_demo_csv, DemoSet};
use crate::inner_loop::ConstraintForm;
use crate::qp::{solve_qp, QpStatus};
use crate::simulator::{run_scenario, SimEvent, TrajectoryLog};
use crate::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hybridctl", version, about = "Hybrid force/motion control simulator and tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run line-sweep scenarios and write a CSV log and JSON summary for each.
    Simulate(SimulateArgs),
    /// Fit a GMM to demonstrations and write a stiffness schedule.
    Learn(LearnArgs),
    /// Run a heatmap-guided scan over a synthetic spine.
    Scan(ScanArgs),
    /// Solve a QP problem file and print the solution and KKT residuals.
    QpCheck(QpCheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config files.
    #[arg(required = true)]
    pub configs: Vec<PathBuf>,
    /// Directory for `<name>.csv` and `<name>.summary.json`.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Force profile override: `step:F`, `sine:A,P,O` or `schedule:t=f,...` (N, s).
    #[arg(long)]
    pub force: Option<String>,
    /// Use the uncorrected acceleration constraint and record the
    /// finite-difference constraint-rate check.
    #[arg(long)]
    pub uncorrected_constraint: bool,
    /// Record the finite-difference constraint-rate check.
    #[arg(long)]
    pub check_constraint: bool,
    /// Parallel workers, one scenario each.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Directory of demonstration CSVs, with an optional `manifest.toml`.
    /// Defaults to `impedance.demos_dir` of the config.
    pub demos_dir: Option<PathBuf>,
    /// Config supplying the `[impedance]` section and the seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stiffness schedule output.
    #[arg(long, default_value = "out/schedule.toml")]
    pub out: PathBuf,
    /// Fit report output.
    #[arg(long, default_value = "out/learn_report.json")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    pub config: PathBuf,
    /// Directory for `<name>.csv`, `<name>.frames.csv` and `<name>.summary.json`.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct QpCheckArgs {
    pub problem: PathBuf,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

impl Failure {
    fn input(error: Error) -> Self {
        Self { code: EXIT_CONFIG, error }
    }

    fn run(error: Error) -> Self {
        let code = match error {
            Error::Simulation { .. } => EXIT_DIVERGED,
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self { code, error }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Learn(a) => cmd_learn(&a),
        Command::Scan(a) => cmd_scan(&a),
        Command::QpCheck(a) => cmd_qp_check(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::run(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("summaries serialize");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
}

/// CSV header for a log of an `n`-joint arm.
pub fn csv_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|i| format!("q{i}")));
    h.extend((0..n).map(|i| format!("qd{i}")));
    h.extend(["fx_c", "fd_c", "ex", "ey", "ez"].map(String::from));
    h.extend((0..n).map(|i| format!("tau{i}")));
    h.extend(["qp_iters", "qp_status", "resid_w"].map(String::from));
    h
}

pub fn write_log_csv(path: &Path, log: &TrajectoryLog) -> crate::Result<()> {
    let err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(csv_header(log.dof)).map_err(err)?;
    for r in &log.records {
        let e = r.position_error();
        let mut row = vec![r.t.to_string()];
        row.extend(r.q.iter().map(f64::to_string));
        row.extend(r.qdot.iter().map(f64::to_string));
        row.extend([r.force, r.force_desired, e.x, e.y, e.z].map(|v| v.to_string()));
        row.extend(r.tau.iter().map(f64::to_string));
        row.push(r.qp_iterations.to_string());
        row.push(r.qp_status.as_str().to_string());
        row.push(r.residual.to_string());
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_frames_csv(path: &Path, frames: &[ScanFrame]) -> crate::Result<()> {
    let err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["t", "u_px", "deviation_px", "true_deviation_px", "confidence", "lateral_command_mps"])
        .map_err(err)?;
    for f in frames {
        w.write_record([f.t, f.u_px, f.deviation_px, f.true_deviation_px, f.confidence, f.command].map(|v| v.to_string()))
            .map_err(err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Headline numbers of a closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub constraint: ConstraintForm,
    pub steps: usize,
    pub transient_s: f64,
    pub force_error_max_n: f64,
    pub force_error_mean_n: f64,
    pub force_error_rms_n: f64,
    /// Mean signed force error over the final second.
    pub force_error_final_mean_n: f64,
    pub final_position_m: [f64; 3],
    pub final_position_error_m: f64,
    pub final_rotation_error_rad: f64,
    pub max_rotation_error_rad: f64,
    pub path_length_m: f64,
    pub max_constraint_velocity_mps: f64,
    pub max_gap_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_constraint_rate_fd: Option<f64>,
    pub qp_iterations_max: usize,
    pub qp_iterations_mean: f64,
    pub qp_fallbacks: usize,
    pub contact_tension_events: usize,
    pub energy_drift_j: f64,
    pub runtime_s: f64,
}

impl RunSummary {
    pub fn from_log(name: &str, constraint: ConstraintForm, log: &TrajectoryLog, transient: f64, runtime_s: f64) -> Self {
        let errs: Vec<f64> = log.after(transient).map(|r| r.force - r.force_desired).collect();
        let count = errs.len().max(1) as f64;
        let t_end = log.last().t;
        let tail: Vec<f64> = log.after(t_end - 1.0).map(|r| r.force - r.force_desired).collect();
        let last = log.last();
        let path_length = log.records.windows(2).map(|w| (w[1].position - w[0].position).norm()).sum();
        let max_of = |f: &dyn Fn(&crate::simulator::LogRecord) -> f64| log.records.iter().map(f).fold(0.0, f64::max);
        let rates: Vec<f64> = log.records.iter().filter_map(|r| r.constraint_rate).collect();
        Self {
            name: name.to_string(),
            constraint,
            steps: log.records.len(),
            transient_s: transient,
            force_error_max_n: errs.iter().fold(0.0, |m, e| m.max(e.abs())),
            force_error_mean_n: errs.iter().map(|e| e.abs()).sum::<f64>() / count,
            force_error_rms_n: (errs.iter().map(|e| e * e).sum::<f64>() / count).sqrt(),
            force_error_final_mean_n: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            final_position_m: last.position.into(),
            final_position_error_m: last.position_error().norm(),
            final_rotation_error_rad: last.rotation_error,
            max_rotation_error_rad: max_of(&|r| r.rotation_error),
            path_length_m: path_length,
            max_constraint_velocity_mps: max_of(&|r| r.constraint_velocity.abs()),
            max_gap_m: max_of(&|r| r.gap.abs()),
            max_constraint_rate_fd: (!rates.is_empty()).then(|| rates.iter().fold(0.0_f64, |m, v| m.max(v.abs()))),
            qp_iterations_max: log.records.iter().map(|r| r.qp_iterations).max().unwrap_or(0),
            qp_iterations_mean: log.records.iter().map(|r| r.qp_iterations as f64).sum::<f64>() / log.records.len().max(1) as f64,
            qp_fallbacks: log.records.iter().filter(|r| r.fallback).count(),
            contact_tension_events: log.events.iter().filter(|e| matches!(e, SimEvent::ContactTension { .. })).count(),
            energy_drift_j: log.energy.drift(),
            runtime_s,
        }
    }
}

fn simulate_one(path: &Path, args: &SimulateArgs, force: Option<&ForceSection>) -> CliResult<RunSummary> {
    let cfg = LoadedConfig::load(path).map_err(Failure::input)?;
    let mut cfg_file = cfg.file.clone();
    if let Some(f) = force {
        cfg_file.scenario.get_or_insert_with(Default::default).force = Some(f.clone());
    }
    let cfg = LoadedConfig {
        file: cfg_file,
        base_dir: cfg.base_dir,
    };
    let mut scn = cfg.scenario().map_err(Failure::input)?;
    if args.uncorrected_constraint {
        scn.setup.constraint = ConstraintForm::Uncorrected;
        scn.setup.check_constraint = true;
    }
    if args.check_constraint {
        scn.setup.check_constraint = true;
    }
    let transient = cfg.file.scenario.as_ref().map_or(0.5, |s| s.transient_s);
    let name = stem(path);
    log::info!("simulating {name}");
    let start = Instant::now();
    let log = run_scenario(&scn).map_err(Failure::run)?;
    let summary = RunSummary::from_log(&name, scn.setup.constraint, &log, transient, start.elapsed().as_secs_f64());
    let csv_path = args.out_dir.join(format!("{name}.csv"));
    write_log_csv(&csv_path, &log).map_err(Failure::run)?;
    write_json(&args.out_dir.join(format!("{name}.summary.json")), &summary)?;
    Ok(summary)
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<i32> {
    let force = args
        .force
        .as_deref()
        .map(ForceSection::parse_override)
        .transpose()
        .map_err(Failure::input)?;
    create_dir(&args.out_dir)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<RunSummary>>>> = Mutex::new((0..args.configs.len()).map(|_| None).collect());
    let workers = args.jobs.clamp(1, args.configs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = args.configs.get(i) else { break };
                let r = simulate_one(path, args, force.as_ref());
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    let mut code = 0;
    for (path, r) in args.configs.iter().zip(results.into_inner().expect("result slots")) {
        match r.expect("every config is processed") {
            Ok(s) => println!(
                "{}: force error after {:.2} s max {:.3e} N rms {:.3e} N, final pose error {:.3e} m / {:.3e} rad, qp iterations max {} mean {:.2}{}",
                s.name,
                s.transient_s,
                s.force_error_max_n,
                s.force_error_rms_n,
                s.final_position_error_m,
                s.final_rotation_error_rad,
                s.qp_iterations_max,
                s.qp_iterations_mean,
                s.max_constraint_rate_fd
                    .map_or(String::new(), |v| format!(", max constraint rate {v:.3e}"))
            ),
            Err(f) => {
                eprintln!("error: {}: {}", path.display(), f.error);
                if code == 0 {
                    code = f.code;
                }
            }
        }
    }
    Ok(code)
}

#[derive(Debug, Serialize)]
struct LearnSummary {
    demos: usize,
    samples_per_demo: Vec<usize>,
    components: usize,
    iterations: usize,
    converged: bool,
    final_average_log_likelihood: f64,
    log_likelihood: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
    position_scale: f64,
    orientation_scale: f64,
    runtime_s: f64,
}

/// Loads demos listed in `manifest.toml`, or every CSV in name order.
pub fn load_demo_dir(dir: &Path) -> crate::Result<DemoSet> {
    let manifest = dir.join("manifest.toml");
    let (files, period) = if manifest.is_file() {
        let m = DemoManifest::load(&manifest)?;
        (m.files.iter().map(|f| dir.join(f)).collect::<Vec<_>>(), Some(m.sample_period_s))
    } else {
        let entries = std::fs::read_dir(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        (files, None)
    };
    if files.len() < 2 {
        return Err(Error::Config(format!("{}: need at least 2 demonstrations, found {}", dir.display(), files.len())));
    }
    let demos = files.iter().map(|f| read_demo_csv(f)).collect::<crate::Result<Vec<_>>>()?;
    let period = match period {
        Some(p) => p,
        None if demos[0].len() >= 2 => demos[0].times[1] - demos[0].times[0],
        None => return Err(Error::Config("cannot infer the sample period".into())),
    };
    DemoSet::new(demos, period).map_err(|e| Error::Config(e.to_string()))
}

pub fn cmd_learn(args: &LearnArgs) -> CliResult<i32> {
    let cfg = args.config.as_deref().map(LoadedConfig::load).transpose().map_err(Failure::input)?;
    let dir = match (&args.demos_dir, &cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => match c.file.impedance.as_ref().and_then(|i| i.demos_dir.as_ref()) {
            Some(d) => c.resolve(d),
            None => return Err(Failure::input(Error::Config("no demos directory given".into()))),
        },
        (None, None) => return Err(Failure::input(Error::Config("no demos directory given".into()))),
    };
    let set = load_demo_dir(&dir).map_err(Failure::input)?;
    let opts = cfg.as_ref().map(LoadedConfig::learn_options).unwrap_or_default();
    let start = Instant::now();
    let report = learn(&set, &opts).map_err(Failure::run)?;
    let runtime = start.elapsed().as_secs_f64();
    create_parent(&args.out)?;
    ScheduleFile::from_schedule(&report.schedule).save(&args.out).map_err(Failure::run)?;
    let fit = &report.fit;
    let summary = LearnSummary {
        demos: set.demos.len(),
        samples_per_demo: set.demos.iter().map(|d| d.len()).collect(),
        components: fit.model.k(),
        iterations: fit.iterations,
        converged: fit.converged,
        final_average_log_likelihood: fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
        log_likelihood: fit.log_likelihood.clone(),
        weights: fit.model.weights.clone(),
        means: fit.model.means.iter().map(|m| m.iter().copied().collect()).collect(),
        covariances: fit
            .model
            .covariances
            .iter()
            .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
        position_scale: report.scales.0,
        orientation_scale: report.scales.1,
        runtime_s: runtime,
    };
    create_parent(&args.report)?;
    write_json(&args.report, &summary)?;
    println!(
        "K = {}, iterations = {}, converged = {}, final average log-likelihood = {:.6}",
        summary.components, summary.iterations, summary.converged, summary.final_average_log_likelihood
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct ScanSummary {
    #[serde(flatten)]
    run: RunSummary,
    centering: CenteringStats,
    force_reference_n: f64,
}

pub fn cmd_scan(args: &ScanArgs) -> CliResult<i32> {
    let cfg = LoadedConfig::load(&args.config).map_err(Failure::input)?;
    let setup = cfg.scan_setup().map_err(Failure::input)?;
    let transient = cfg.file.guidance.as_ref().map_or(2.0, |g| g.transient_s);
    let name = stem(&args.config);
    create_dir(&args.out_dir)?;
    let start = Instant::now();
    let report = run_scan(&setup).map_err(Failure::run)?;
    let runtime = start.elapsed().as_secs_f64();
    write_log_csv(&args.out_dir.join(format!("{name}.csv")), &report.log).map_err(Failure::run)?;
    write_frames_csv(&args.out_dir.join(format!("{name}.frames.csv")), &report.frames).map_err(Failure::run)?;
    let summary = ScanSummary {
        run: RunSummary::from_log(&name, setup.setup.constraint, &report.log, transient, runtime),
        centering: report.centering(transient),
        force_reference_n: setup.scan.force,
    };
    write_json(&args.out_dir.join(format!("{name}.summary.json")), &summary)?;
    let c = &summary.centering;
    println!(
        "{name}: {} frames after {transient:.1} s, deviation max {:.2} px rms {:.2} px, lateral command max {:.3e} m/s, force error rms {:.3e} N",
        c.frames, c.max_abs_deviation_px, c.rms_deviation_px, c.max_abs_command, summary.run.force_error_rms_n
    );
    Ok(0)
}

fn fmt_vec(v: &nalgebra::DVector<f64>) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x:.12e}")).collect();
    format!("[{}]", items.join(", "))
}

pub fn cmd_qp_check(args: &QpCheckArgs) -> CliResult<i32> {
    let file = QpFile::load(&args.problem).map_err(Failure::input)?;
    let (prob, opts) = file.problem().map_err(Failure::input)?;
    let sol = solve_qp(&prob, None, &opts);
    println!("status: {}", sol.status);
    println!("iterations: {}", sol.iterations);
    println!("u: {}", fmt_vec(&sol.u));
    println!("lambda_ineq: {}", fmt_vec(&sol.lambda_ineq));
    println!("nu_eq: {}", fmt_vec(&sol.nu_eq));
    println!("objective: {:.12e}", prob.objective(&sol.u));
    println!(
        "residuals: stationarity {:.3e} primal_eq {:.3e} primal_ineq {:.3e} complementarity {:.3e}",
        sol.kkt.stationarity, sol.kkt.primal_eq, sol.kkt.primal_ineq, sol.kkt.complementarity
    );
    Ok(match sol.status {
        QpStatus::Optimal => 0,
        QpStatus::Infeasible => EXIT_INFEASIBLE,
        QpStatus::MaxIter => EXIT_FAILURE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = csv_header(2);
        assert_eq!(
            h.join(","),
            "t,q0,q1,qd0,qd1,fx_c,fd_c,ex,ey,ez,tau0,tau1,qp_iters,qp_status,resid_w"
        );
        assert_eq!(csv_header(6).len(), 1 + 6 * 3 + 5 + 3);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["hybridctl", "simulate", "a.cfg", "b.cfg", "--force", "step:15", "--jobs", "2"]).unwrap();
        match cli.command {
            Command::Simulate(a) => {
                assert_eq!(a.configs.len(), 2);
                assert_eq!(a.force.as_deref(), Some("step:15"));
                assert_eq!(a.jobs, 2);
                assert!(!a.uncorrected_constraint);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["hybridctl", "simulate"]).is_err());
    }
}
