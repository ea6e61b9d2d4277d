#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

pub const SCENARIO_NOW: &str = "2024-08-02T12:00:00Z";
pub const SCENARIO_VM: &str = "vm-analytics-07";

pub fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scenario")
}

pub fn read_fixture(name: &str) -> String {
    fs::read_to_string(scenario_dir().join(name)).unwrap()
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Fresh copy of the scenario fixture in a temporary directory.
pub fn scenario_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_tree(&scenario_dir(), dir.path());
    dir
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `fleetopt` binary with `--config <dir>/config.json`.
pub fn fleetopt(dir: &Path, args: &[&str]) -> Run {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_fleetopt"))
        .arg("--config")
        .arg(dir.join("config.json"))
        .args(args)
        .env_remove("FLEETOPT_CONFIG")
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = fleetopt(dir, args);
    assert_eq!(r.code, 0, "fleetopt {args:?} failed: {}", r.stderr);
    r
}

pub fn scenario_now() -> i64 {
    fleetopt::timefmt::parse_rfc3339(SCENARIO_NOW).unwrap()
}

pub fn scenario_catalog() -> fleetopt_core::FlavorCatalog {
    serde_json::from_str(&read_fixture("catalog.json")).unwrap()
}

/// In-memory blackboard holding the scenario's utilization observations.
pub fn scenario_board() -> fleetopt::blackboard::Blackboard {
    use fleetopt::observer::{build_observation, ingest_inventory, ingest_telemetry, post_observations};
    let now = scenario_now();
    let bb = fleetopt::blackboard::Blackboard::in_memory(std::sync::Arc::new(
        fleetopt::blackboard::FixedClock::new(now),
    ));
    let handles = ingest_inventory(&read_fixture("inventory.json")).unwrap();
    let series = ingest_telemetry(read_fixture("telemetry.csv").as_bytes(), &handles).unwrap();
    let obs: Vec<_> = series
        .iter()
        .map(|s| build_observation(&s.handle, &s.samples, fleetopt_core::time::WEEK_MS, now, 300_000).unwrap())
        .collect();
    post_observations(&bb, &obs).unwrap();
    bb
}
