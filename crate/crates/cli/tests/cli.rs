use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/two_obstacle.toml")
}

fn rwoa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwoa"))
        .args(args)
        .env("RWOA_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn edited_bundled(dir: &Path, from: &str, to: &str) -> PathBuf {
    let text = fs::read_to_string(bundled()).unwrap();
    assert!(text.contains(from), "bundled scenario has no `{from}`");
    let path = dir.join("edited.toml");
    fs::write(&path, text.replacen(from, to, 1)).unwrap();
    path
}

#[test]
fn validate_accepts_bundled_scenario() {
    let out = rwoa(&["validate", bundled().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("ok"));
}

#[test]
fn validate_names_distance_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let path = edited_bundled(dir.path(), "d_i = 0.25", "d_i = 0.05");
    let out = rwoa(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("controller.d_i") && err.contains("d_m"), "{err}");
}

#[test]
fn validate_cites_target_placement() {
    let dir = tempfile::tempdir().unwrap();
    // move the first obstacle onto the target
    let path = edited_bundled(dir.path(), "center = [-0.28, 0.42, 0.12]", "center = [0.0, 0.40, -0.08]");
    let out = rwoa(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("target placement rule"), "{}", stderr(&out));
}

#[test]
fn validate_lists_at_most_twenty_violations() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = fs::read_to_string(bundled()).unwrap();
    for id in 0..30 {
        text.push_str(&format!("\n[[obstacles]]\nid = {}\ncenter = [0.0, 0.0, 0.0]\naxes = [-1.0, 0.1, 0.1]\n", 100 + id));
    }
    let path = dir.path().join("many.toml");
    fs::write(&path, text).unwrap();
    let out = rwoa(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    let listed = err.lines().filter(|l| l.starts_with("  obstacles[")).count();
    assert_eq!(listed, 20, "{err}");
    assert!(err.contains("and 10 more"), "{err}");
}

#[test]
fn missing_file_is_a_runtime_error() {
    for cmd in ["run", "validate", "compare"] {
        let out = rwoa(&[cmd, "/definitely/not/here.toml"]);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        assert!(stderr(&out).contains("not found"), "{}", stderr(&out));
    }
}

#[test]
fn run_writes_requested_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("full");
    let out = rwoa(&[
        "run",
        bundled().to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--emit",
        "trajectory_csv,summary",
        "--emit",
        "plot_data",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 1);
    for name in ["trajectory.csv", "summary.json", "ee_path.csv", "clearance.csv", "gamma.csv"] {
        assert!(out_dir.join(name).is_file(), "{name}");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "FullRWOA");
    assert_eq!(summary["collision_count"], 0);
    let gamma = fs::read_to_string(out_dir.join("gamma.csv")).unwrap();
    assert_eq!(gamma.lines().next(), Some("t,gamma_1,gamma_2"));
}

#[test]
fn run_without_avoidance_reports_collision() {
    let dir = tempfile::tempdir().unwrap();
    let out = rwoa(&[
        "run",
        bundled().to_str().unwrap(),
        "--mode",
        "NoAvoidance",
        "--quiet",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).is_empty());
    assert!(dir.path().join("trajectory.csv").is_file());
}

#[test]
fn run_rejects_unknown_mode() {
    let out = rwoa(&["run", bundled().to_str().unwrap(), "--mode", "Sideways"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown mode"));
}

/// Parses the text table back into (mode, numbers) rows.
fn parse_table(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .skip(1)
        .map(|line| {
            let mut cols = line.split_whitespace();
            let mode = cols.next().unwrap().to_string();
            (mode, cols.map(|c| c.parse().unwrap()).collect())
        })
        .collect()
}

#[test]
fn compare_table_matches_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = rwoa(&["compare", bundled().to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = parse_table(&stdout(&out));
    let json: Vec<Value> = serde_json::from_str(&fs::read_to_string(dir.path().join("compare.json")).unwrap()).unwrap();

    let modes: Vec<&str> = json.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["NoAvoidance", "EndEffectorOnly", "FullRWOA"]);
    let collisions: Vec<u64> = json.iter().map(|r| r["collision_count"].as_u64().unwrap()).collect();
    assert!(collisions[0] >= 1 && collisions[1] >= 1 && collisions[2] == 0, "{collisions:?}");

    assert_eq!(table.len(), 3);
    for ((mode, cols), row) in table.iter().zip(&json) {
        assert_eq!(mode, row["mode"].as_str().unwrap());
        assert_eq!(cols[0], row["collision_count"].as_f64().unwrap());
        let fields = ["min_ee_clearance", "min_link_clearance", "final_target_error"];
        for (value, field) in cols[1..4].iter().zip(fields) {
            assert!((value - row[field].as_f64().unwrap()).abs() <= 5e-7, "{mode} {field}");
        }
        let micros = row["mean_cycle_seconds"].as_f64().unwrap() * 1e6;
        assert!((cols[4] - micros).abs() <= 5e-3, "{mode} timing");
    }
}

#[test]
fn compare_without_obstacles_gives_identical_modes() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(bundled()).unwrap();
    let cut = text.find("[[obstacles]]").unwrap();
    let path = dir.path().join("empty.toml");
    fs::write(&path, &text[..cut]).unwrap();
    let out = rwoa(&[
        "compare",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--emit",
        "trajectory_csv",
        "--quiet",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let read = |m: &str| fs::read_to_string(dir.path().join(format!("{m}.trajectory.csv"))).unwrap();
    let reference = read("NoAvoidance");
    assert_eq!(read("EndEffectorOnly"), reference);
    assert_eq!(read("FullRWOA"), reference);
}

#[test]
fn accept_runs_selected_criteria() {
    let out = rwoa(&["accept", "2", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.contains("PASS")), "{text}");
}

#[test]
fn accept_rejects_unknown_criterion() {
    let out = rwoa(&["accept", "11"]);
    assert_eq!(out.status.code(), Some(3));
}
