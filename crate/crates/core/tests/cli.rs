//! End-to-end runs of the `hybridctl` binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use hybridctl::cli::csv_header;
use serde_json::Value;

fn hybridctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridctl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn cfg(name: &str) -> String {
    common::configs_dir().join(name).to_string_lossy().into_owned()
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Parses a log CSV, checking the header and the column count of every row.
fn read_log(path: &Path, n: usize) -> Vec<csv::StringRecord> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, csv_header(n));
    assert_eq!(
        header.join(","),
        "t,q0,q1,q2,q3,q4,q5,qd0,qd1,qd2,qd3,qd4,qd5,fx_c,fd_c,ex,ey,ez,tau0,tau1,tau2,tau3,tau4,tau5,qp_iters,qp_status,resid_w"
    );
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert!(rows.iter().all(|r| r.len() == header.len()));
    rows
}

#[test]
fn simulate_bundled_sine_and_step_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = path_str(dir.path());
    let o = hybridctl(&["simulate", &cfg("scenario_sine.cfg"), "--out-dir", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_log(&dir.path().join("scenario_sine.csv"), 6);
    assert_eq!(rows.len(), 6201);
    let s = read_json(&dir.path().join("scenario_sine.summary.json"));
    assert!(s["force_error_max_n"].as_f64().unwrap() <= 0.05);
    assert!(s["force_error_rms_n"].as_f64().unwrap() <= 0.02);
    assert!(s["final_position_error_m"].as_f64().unwrap() <= 1e-3);
    assert!(s["qp_iterations_max"].as_u64().unwrap() >= 1);

    // the step override turns the sine config into the step scenario
    let sub = dir.path().join("step");
    let o = hybridctl(&["simulate", &cfg("scenario_sine.cfg"), "--force", "step:15", "--out-dir", &path_str(&sub)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_log(&sub.join("scenario_sine.csv"), 6);
    let fd_col = csv_header(6).iter().position(|h| h == "fd_c").unwrap();
    for r in rows.iter().filter(|r| r[0].parse::<f64>().unwrap() >= 0.0) {
        assert_eq!(r[fd_col].parse::<f64>().unwrap(), 15.0);
    }
    let s = read_json(&sub.join("scenario_sine.summary.json"));
    assert!(s["force_error_max_n"].as_f64().unwrap() <= 0.05);
}

#[test]
fn simulate_reports_config_errors_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing_robot = dir.path().join("missing_robot.cfg");
    std::fs::write(&missing_robot, "[robot]\nfile = \"nope.toml\"\n[scenario.force]\nprofile = \"step\"\nvalue_n = 15.0\n").unwrap();
    let o = hybridctl(&["simulate", &path_str(&missing_robot), "--out-dir", &path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("robot.file"));

    let unknown = dir.path().join("unknown.cfg");
    std::fs::write(&unknown, "[contact]\nfriction_mu = 0.5\nfriction_muu = 0.1\n").unwrap();
    let o = hybridctl(&["simulate", &path_str(&unknown), "--out-dir", &path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("contact") && err.contains("friction_muu"), "{err}");

    let o = hybridctl(&["simulate", &cfg("scenario_sine.cfg"), "--force", "ramp:3", "--out-dir", &path_str(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn learn_bundled_demos_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let sched = dir.path().join(format!("{tag}.toml"));
        let rep = dir.path().join(format!("{tag}.json"));
        let o = hybridctl(&["learn", &cfg("demos"), "--out", &path_str(&sched), "--report", &path_str(&rep)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (std::fs::read(sched).unwrap(), read_json(&rep))
    };
    let (a, rep) = run("a");
    let (b, _) = run("b");
    assert_eq!(a, b);
    assert_eq!(rep["components"], 4);
    assert_eq!(rep["converged"], true);
    assert!(rep["iterations"].as_u64().unwrap() <= 500);
    assert_eq!(rep["demos"], 5);
    let ll: Vec<f64> = rep["log_likelihood"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(ll.last().copied(), rep["final_average_log_likelihood"].as_f64());
}

#[test]
fn learned_schedule_is_consumed_by_a_scenario_config() {
    let dir = tempfile::tempdir().unwrap();
    let sched = dir.path().join("schedule.toml");
    let o = hybridctl(&["learn", &cfg("demos"), "--out", &path_str(&sched), "--report", &path_str(&dir.path().join("r.json"))]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(common::configs_dir().join("scenario_step.cfg"))
        .unwrap()
        .replace("robots/arm6.toml", &path_str(&common::configs_dir().join("robots/arm6.toml")))
        .replace("force_integral_clamp_ns = 20.0", "force_integral_clamp_ns = 20.0\nschedule_file = \"schedule.toml\"")
        .replace("duration_s = 6.0", "duration_s = 1.0");
    let config = dir.path().join("scheduled.cfg");
    std::fs::write(&config, text).unwrap();
    let o = hybridctl(&["simulate", &path_str(&config), "--out-dir", &path_str(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&dir.path().join("scheduled.summary.json"));
    assert!(s["max_rotation_error_rad"].as_f64().unwrap() <= 0.01);
}

#[test]
fn learn_needs_two_demos() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(common::configs_dir().join("demos/demo_1.csv"), dir.path().join("only.csv")).unwrap();
    let o = hybridctl(&["learn", &path_str(dir.path()), "--out", &path_str(&dir.path().join("s.toml"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn learn_with_one_component_reports_sample_moments() {
    // identical demos align trivially, so the fitted data are the raw rows
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    std::fs::create_dir(&demos).unwrap();
    let mut rows = Vec::new();
    let mut text = String::from("t,x1,x2\n");
    for i in 0..40 {
        let t = i as f64 * 0.1;
        let row = [t, (0.7 * t).sin(), 0.2 * t + (1.3 * t).cos() * 0.1];
        text.push_str(&format!("{},{},{}\n", row[0], row[1], row[2]));
        rows.push(row);
    }
    for name in ["a.csv", "b.csv", "c.csv"] {
        std::fs::write(demos.join(name), &text).unwrap();
    }
    let config = dir.path().join("k1.cfg");
    std::fs::write(&config, "seed = 3\n[impedance]\ncomponents = 1\n").unwrap();
    let rep_path = dir.path().join("r.json");
    let o = hybridctl(&[
        "learn",
        &path_str(&demos),
        "--config",
        &path_str(&config),
        "--out",
        &path_str(&dir.path().join("s.toml")),
        "--report",
        &path_str(&rep_path),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = read_json(&rep_path);
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let got: Vec<f64> = rep["means"][0].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    for j in 0..3 {
        assert!((got[j] - mean[j]).abs() <= 1e-12, "mean {j}: {} vs {}", got[j], mean[j]);
        for k in 0..3 {
            let cov = rows.iter().map(|r| (r[j] - mean[j]) * (r[k] - mean[k])).sum::<f64>() / n;
            let c = rep["covariances"][0][j][k].as_f64().unwrap();
            // EM adds a small ridge to the diagonal
            assert!((c - cov).abs() <= 1e-5, "cov {j}{k}: {c} vs {cov}");
        }
    }
}

#[test]
fn scan_default_config_centres_the_spine() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridctl(&["scan", &cfg("scan_default.cfg"), "--out-dir", &path_str(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(&dir.path().join("scan_default.summary.json"));
    assert_eq!(s["force_reference_n"].as_f64(), Some(10.0));
    assert!(s["centering"]["max_abs_deviation_px"].as_f64().unwrap() <= 5.0);
    read_log(&dir.path().join("scan_default.csv"), 6);
    let frames = csv::Reader::from_path(dir.path().join("scan_default.frames.csv")).unwrap().records().count();
    assert_eq!(frames, 200);
}

#[test]
fn qp_check_bundled_problems() {
    let o = hybridctl(&["qp-check", &cfg("qp/bound.toml")]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("status: optimal"));
    assert!(out.contains("u: [1.000000000000e0, 0.000000000000e0]"), "{out}");

    let o = hybridctl(&["qp-check", &cfg("qp/infeasible.toml")]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stdout).contains("status: infeasible"));

    let o = hybridctl(&["qp-check", &cfg("qp/random.toml")]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8_lossy(&o.stdout);
    let line = out.lines().find(|l| l.starts_with("residuals:")).unwrap();
    let values: Vec<f64> = line.split_whitespace().filter_map(|w| w.parse().ok()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.iter().all(|v| *v <= 1e-8), "{line}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "p = [[1.0]]\nq = [0.0, 1.0]\n").unwrap();
    assert_eq!(hybridctl(&["qp-check", &path_str(&bad)]).status.code(), Some(2));
    std::fs::write(&bad, "p = [[1.0]]\nq = \"zero\"\n").unwrap();
    assert_eq!(hybridctl(&["qp-check", &path_str(&bad)]).status.code(), Some(2));
}

#[test]
fn bundled_random_qp_matches_the_enumeration_oracle() {
    let file = hybridctl::config::QpFile::load(&common::configs_dir().join("qp/random.toml")).unwrap();
    let (prob, opts) = file.problem().unwrap();
    let sol = hybridctl::qp::solve_qp(&prob, None, &opts);
    let (u, _) = common::enumerate_qp(&prob).unwrap();
    assert!((sol.u - u).amax() <= 1e-8);
}

#[test]
fn help_lists_every_subcommand() {
    let o = hybridctl(&["--help"]);
    let out = String::from_utf8_lossy(&o.stdout);
    for sub in ["simulate", "learn", "scan", "qp-check"] {
        assert!(out.contains(sub), "{out}");
    }
}
