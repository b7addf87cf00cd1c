//! Bundled configuration files: round trips and agreement with the
//! built-in models they describe.

mod common;

use std::path::{Path, PathBuf};

use hybridctl::config::{parse_toml, to_toml, ConfigFile, DemoManifest, QpFile, RobotDescription};
use hybridctl::dynamics::RobotModel;
use hybridctl::impedance::{read_demo_csv, synthetic_demos};
use hybridctl::simulator::{ForceProfile, Scenario};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    v.sort();
    v
}

fn round_trip<T: DeserializeOwned + Serialize + PartialEq + std::fmt::Debug>(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let first: T = parse_toml(&text, &path.display().to_string()).unwrap();
    let again: T = parse_toml(&to_toml(&first).unwrap(), "serialized").unwrap();
    assert_eq!(first, again, "{}", path.display());
}

#[test]
fn every_bundled_file_round_trips() {
    let dir = common::configs_dir();
    let cfgs = files(&dir, "cfg");
    assert_eq!(cfgs.len(), 3);
    for p in &cfgs {
        round_trip::<ConfigFile>(p);
    }
    for p in files(&dir.join("robots"), "toml") {
        round_trip::<RobotDescription>(&p);
    }
    for p in files(&dir.join("qp"), "toml") {
        round_trip::<QpFile>(&p);
    }
    round_trip::<DemoManifest>(&dir.join("demos/manifest.toml"));
}

fn same_model(a: &RobotModel, b: &RobotModel) {
    assert_eq!(a.dof(), b.dof());
    assert_eq!(a.gravity(), b.gravity());
    assert!((a.tool().rotation - b.tool().rotation).amax() <= 1e-15);
    assert_eq!(a.tool().translation, b.tool().translation);
    for (ja, jb) in a.joints().iter().zip(b.joints()) {
        assert!((ja.offset.rotation - jb.offset.rotation).amax() <= 1e-15);
        assert_eq!(ja.offset.translation, jb.offset.translation);
        assert_eq!(ja.axis, jb.axis);
    }
    for (la, lb) in a.links().iter().zip(b.links()) {
        assert_eq!(la.mass, lb.mass);
        assert_eq!(la.com, lb.com);
        assert_eq!(la.inertia, lb.inertia);
    }
}

#[test]
fn robot_files_describe_the_built_in_models() {
    let dir = common::configs_dir().join("robots");
    same_model(&RobotDescription::load(&dir.join("arm6.toml")).unwrap().model().unwrap(), &RobotModel::arm6());
    same_model(&RobotDescription::load(&dir.join("planar_2r.toml")).unwrap().model().unwrap(), &RobotModel::planar_2r());
}

#[test]
fn scenario_configs_match_the_built_in_board_sweep() {
    let cases = [
        ("scenario_sine.cfg", ForceProfile::Sinusoid { amplitude: 5.0, period: 6.0, offset: 10.0 }),
        ("scenario_step.cfg", ForceProfile::Step { value: 15.0 }),
    ];
    for (name, profile) in cases {
        let cfg = hybridctl::config::LoadedConfig::load(&common::configs_dir().join(name)).unwrap();
        let got = cfg.scenario().unwrap();
        let want = Scenario::board_sweep(profile.clone());
        assert_eq!(got.sweep.force, profile);
        assert_eq!(got.sweep.start, want.sweep.start);
        assert_eq!(got.sweep.end, want.sweep.end);
        assert_eq!(got.sweep.speed, want.sweep.speed);
        assert!((got.sweep.rotation - want.sweep.rotation).amax() <= 1e-15);
        let (g, w) = (&got.setup, &want.setup);
        same_model(&g.robot, &w.robot);
        assert_eq!(g.plane, w.plane);
        assert_eq!(g.plant, w.plant);
        assert_eq!((g.mu, g.duration, g.control_rate, g.press_in), (w.mu, w.duration, w.control_rate, w.press_in));
        assert_eq!(g.weights, w.weights);
        assert_eq!(g.gains, w.gains);
        assert_eq!(g.bounds, w.bounds);
        assert_eq!(g.constraint, w.constraint);
        assert_eq!(g.qp, w.qp);
        assert_eq!(g.q_seed, w.q_seed);
    }
}

#[test]
fn scan_config_carries_the_force_anchors() {
    let text = std::fs::read_to_string(common::configs_dir().join("scan_default.cfg")).unwrap();
    assert!(text.contains("force_anchors_bmi_n = [[18.0, 7.0], [23.0, 10.0], [30.0, 15.0]]"));
    let cfg = hybridctl::config::LoadedConfig::load(&common::configs_dir().join("scan_default.cfg")).unwrap();
    assert_eq!(cfg.scan_setup().unwrap().scan.force, 10.0);
}

#[test]
fn bundled_demos_are_the_seeded_synthetic_set() {
    let dir = common::configs_dir().join("demos");
    let manifest = DemoManifest::load(&dir.join("manifest.toml")).unwrap();
    assert_eq!(manifest.files.len(), 5);
    let want = synthetic_demos(5, 200, manifest.sample_period_s, 5).unwrap();
    for (file, demo) in manifest.files.iter().zip(&want.demos) {
        let got = read_demo_csv(&dir.join(file)).unwrap();
        assert_eq!(got.times, demo.times);
        assert_eq!(got.values, demo.values);
    }
}
