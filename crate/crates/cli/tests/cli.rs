use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tvcbf(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvcbf")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn verify_builtin_waypoint_si_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["verify", "waypoint_si"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&dir.path().join("verify_waypoint_si.json"));
    assert_eq!(report["pass"], true);
    assert!(report["checks"].as_array().unwrap().iter().any(|c| c["check"] == "keep_in:check_rate_thm1"));
}

#[test]
fn overspeed_config_fails_naming_rate_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast.json");
    std::fs::write(&cfg, r#"{"scenario": "waypoint_si", "seed": 1, "overrides": {"path_speed": 1.0}}"#).unwrap();
    let o = tvcbf(&["verify", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("check_rate_thm1"));
    let report = read_json(&dir.path().join("verify_waypoint_si.json"));
    assert_eq!(report["pass"], false);
    assert_eq!(report["seed"], 1);
}

#[test]
fn set_flag_matches_config_override() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["verify", "waypoint_si", "--set", "path_speed=1.0"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_field_kind_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"scenario": {"name": "bad", "model": {"model": "single_integrator", "n": 2},
            "cbfs": [{"label": "b", "field": {"field": "no_such_field"}, "alpha": {"kind": "linear", "slope": 1.0},
                      "capacity": 1.0, "family": {"family": "translate_full", "n": 2},
                      "p": {"kind": "constant", "p": [0, 0]}, "offset": {"kind": "constant", "value": 0.5}}],
            "x0": [0, 0], "horizon": 1.0}}"#,
    )
    .unwrap();
    let o = tvcbf(&["verify", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_field"));
}

#[test]
fn unknown_scenario_and_override_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&tvcbf(&["run", "nowhere"], dir.path())), 2);
    assert_eq!(code(&tvcbf(&["run", "waypoint_si", "--set", "warp=9"], dir.path())), 2);
    assert_eq!(code(&tvcbf(&["run", "waypoint_si", "--dt-sim", "0.003"], dir.path())), 2);
}

#[test]
fn run_waypoint_si_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["run", "waypoint_si"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&dir.path().join("waypoint_si_summary.json"));
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["infeasible_rows"], 0);
    assert!(summary["min_b"].as_f64().unwrap() >= -1e-3);
    let csv = std::fs::read_to_string(dir.path().join("waypoint_si.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,x_0,x_1,u_ref_0,u_ref_1,u_0,u_1,status,"), "{header}");
    assert_eq!(csv.lines().count(), 1 + summary["rows"].as_u64().unwrap() as usize);
}

#[test]
fn run_tv_radius_obstacles_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["run", "obstacles_tv_radius_si"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_horizon_gives_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["run", "waypoint_si", "--set", "horizon=0"], dir.path());
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("waypoint_si.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn lipschitz_of_neg_norm_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["lipschitz", "waypoint_si", "--samples", "2000"], dir.path());
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let raw = v["estimate"]["raw"].as_f64().unwrap();
    assert!((raw - 1.0).abs() < 1e-6, "{raw}");
    assert!(dir.path().join("lipschitz_waypoint_si_keep_in.json").exists());
}

#[test]
fn beta_table_is_zero_at_origin() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcbf(&["beta", "waypoint_si", "--grid", "201"], dir.path());
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(dir.path().join("beta_waypoint_si_keep_in.csv")).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (s, b) = l.split_once(',').unwrap();
            (s.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert!(rows.iter().any(|&(s, b)| s == 0.0 && b == 0.0));
    assert!(rows.windows(2).all(|w| w[1].1 >= w[0].1));
}

#[test]
fn shown_scenario_round_trips_as_inline_config() {
    let dir = tempfile::tempdir().unwrap();
    let shown = tvcbf(&["show", "obstacles_const_radius_si"], dir.path());
    assert_eq!(code(&shown), 0);
    let cfg = dir.path().join("inline.json");
    std::fs::write(&cfg, &shown.stdout).unwrap();
    let o = tvcbf(&["verify", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
