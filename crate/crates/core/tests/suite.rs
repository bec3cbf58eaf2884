//! FullRWOA over the bundled scenario and 20 jittered variants. At most two
//! may collide; every colliding scenario is written to
//! `tests/fixtures/regressions/` and replayed on later runs.

use std::fs;
use std::path::PathBuf;

use rwoa::acceptance::scenario_suite;
use rwoa::batch::Execution;
use rwoa::scenario::Scenario;
use rwoa::sim::run;

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/regressions")
}

#[test]
fn full_mode_suite_is_mostly_collision_free() {
    let report = scenario_suite(20, Execution::from_env());
    let dir = fixture_dir();
    fs::create_dir_all(&dir).unwrap();
    for s in report.failures() {
        let path = dir.join(format!("{}.toml", s.name));
        if !path.exists() {
            fs::write(&path, s.to_toml()).unwrap();
        }
    }
    let lines: Vec<String> = report
        .scenarios
        .iter()
        .zip(&report.collision_counts)
        .map(|(s, c)| format!("{}: {c}", s.name))
        .collect();
    assert!(
        report.passed(),
        "{}/{} collision-free; collision cycles per scenario: {}",
        report.collision_free(),
        report.scenarios.len(),
        lines.join(", ")
    );
}

#[test]
fn regression_fixtures_replay() {
    let Ok(entries) = fs::read_dir(fixture_dir()) else {
        return;
    };
    for entry in entries {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let scenario = Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let first = run(&scenario).log;
        assert!(first.summary.aborted.is_none(), "{} aborted", path.display());
        // replays are exact, so a fixture keeps reproducing what it recorded
        assert_eq!(first.to_csv(), run(&scenario).log.to_csv());
    }
}
