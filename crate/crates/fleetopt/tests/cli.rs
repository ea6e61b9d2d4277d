mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use common::{fleetopt, ok, scenario_copy, SCENARIO_VM};
use fleetopt::blackboard::{Blackboard, FixedClock};
use fleetopt::cli::{RunReport, StrategyDoc};
use fleetopt::timefmt::{format_rfc3339, parse_rfc3339};
use fleetopt::workflow::{read_audit, FleetState};
use fleetopt_core::time::WEEK_MS;
use fleetopt_core::{FeedbackRecord, Recommendation, Status};

const LOOP: [&[&str]; 7] = [
    &["ingest"],
    &["recommend"],
    &["strategize"],
    &["emit"],
    &["feedback", "--approve-all", "--actor", "alice"],
    &["apply"],
    &["report"],
];

fn board(dir: &Path) -> Blackboard {
    Blackboard::open(dir.join("state/blackboard"), Arc::new(FixedClock::new(0))).unwrap()
}

fn recs(bb: &Blackboard) -> Vec<Recommendation> {
    bb.list_prefix("/recommendations/").into_iter().map(|r| r.decode().unwrap()).collect()
}

fn proposal_dirs(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = fs::read_dir(dir.join("repo/proposals/2024-W31"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    out.sort();
    out
}

#[test]
fn operator_loop_applies_one_downsize() {
    let dir = scenario_copy();
    let mut last = None;
    for step in LOOP {
        last = Some(ok(dir.path(), step));
    }
    let report = last.unwrap().stdout;
    assert!(report.contains("applied changes: 1"), "{report}");
    assert!(report.contains("flavor m1.large -> m1.medium"), "{report}");

    let bb = board(dir.path());
    let all = recs(&bb);
    let rightsizing: Vec<_> = all.iter().filter(|r| r.agent == "rightsizing").collect();
    assert_eq!(rightsizing.len(), 1);
    let rec = rightsizing[0];
    assert_eq!(rec.status, Status::Applied);
    assert_eq!(rec.proposed_flavor.as_deref(), Some("m1.medium"));

    // One proposal per surfaced recommendation; exactly one is a resize.
    let dirs = proposal_dirs(dir.path());
    assert_eq!(dirs.len(), 3);
    assert!(dirs.contains(&rec.id));
    let fleet = FleetState::load(&dir.path().join("state/fleet-state.json")).unwrap();
    assert_eq!(fleet.resources[&format!("vm/{SCENARIO_VM}")].flavor, "m1.medium");
    assert_eq!(fleet.resources["vm/vm-web-01"].flavor, "m1.small");

    // Audit chain: artifact, feedback record and audit line share the id.
    let fb: FeedbackRecord = bb.get(&format!("/feedback/{}", rec.id)).unwrap().decode().unwrap();
    assert_eq!(fb.actor, "alice");
    let audit = read_audit(&dir.path().join("state/audit.log")).unwrap();
    assert_eq!(audit.len(), 1);
    assert_eq!(audit[0].rec_id, rec.id);
    assert!(dir.path().join("repo/proposals/2024-W31").join(&rec.id).join("metadata.json").exists());

    // Security guides are approved but carry no patch to apply.
    assert!(all.iter().filter(|r| r.agent == "security").all(|r| r.status == Status::Approved));

    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(runs.len(), 7);
    let apply: RunReport = serde_json::from_slice(&fs::read(dir.path().join("runs/0006-apply.json")).unwrap()).unwrap();
    assert_eq!((apply.status.as_str(), apply.exit_code), ("ok", 0));
    assert_eq!(apply.result["applied"][0]["to"], "m1.medium");
}

#[test]
fn pipeline_matches_individual_commands_byte_for_byte() {
    for mode in ["operator", "auto"] {
        let single = scenario_copy();
        for step in LOOP {
            if mode == "auto" && step[0] == "feedback" {
                continue;
            }
            let mut args = vec!["--mode", mode];
            args.extend_from_slice(step);
            ok(single.path(), &args);
        }
        let combined = scenario_copy();
        let mut args = vec!["--mode", mode, "pipeline"];
        if mode == "operator" {
            args.extend_from_slice(&["--approve-all", "--actor", "alice"]);
        }
        ok(combined.path(), &args);
        for file in ["state/blackboard/blackboard.log", "state/fleet-state.json", "state/audit.log"] {
            assert_eq!(
                fs::read(single.path().join(file)).unwrap(),
                fs::read(combined.path().join(file)).unwrap(),
                "{mode}: {file} differs"
            );
        }
        assert_eq!(proposal_dirs(single.path()), proposal_dirs(combined.path()));
    }
}

#[test]
fn auto_mode_marks_its_own_approvals() {
    let dir = scenario_copy();
    ok(dir.path(), &["--mode", "auto", "pipeline"]);
    let bb = board(dir.path());
    let rec = recs(&bb).into_iter().find(|r| r.agent == "rightsizing").unwrap();
    assert_eq!(rec.status, Status::Applied);
    let fb: FeedbackRecord = bb.get(&format!("/feedback/{}", rec.id)).unwrap().decode().unwrap();
    assert_eq!(fb.actor, "auto");
    assert_eq!(read_audit(&dir.path().join("state/audit.log")).unwrap()[0].actor, "auto");
}

#[test]
fn feedback_is_refused_in_auto_mode() {
    let dir = scenario_copy();
    let r = fleetopt(dir.path(), &["--mode", "auto", "feedback", "--approve-all"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let report: RunReport =
        serde_json::from_slice(&fs::read(dir.path().join("runs/0001-feedback.json")).unwrap()).unwrap();
    assert_eq!(report.status, "error");
    assert_eq!(report.exit_code, 2);
}

#[test]
fn recommend_on_an_empty_board_succeeds_with_nothing() {
    let dir = scenario_copy();
    let r = ok(dir.path(), &["recommend"]);
    assert!(r.stdout.contains("recommendations_written=0"), "{}", r.stdout);
    let report: RunReport =
        serde_json::from_slice(&fs::read(dir.path().join("runs/0001-recommend.json")).unwrap()).unwrap();
    assert_eq!(report.result["summary"], "no new recommendations");
}

#[test]
fn error_categories_map_to_exit_codes() {
    let dir = scenario_copy();
    fs::remove_file(dir.path().join("inventory.json")).unwrap();
    assert_eq!(fleetopt(dir.path(), &["ingest"]).code, 2);

    let dir = scenario_copy();
    let mut csv = fs::read_to_string(dir.path().join("telemetry.csv")).unwrap();
    csv.push_str("vm-web-01,not-a-time,1,1,2,4,2,4\n");
    fs::write(dir.path().join("telemetry.csv"), csv).unwrap();
    assert_eq!(fleetopt(dir.path(), &["ingest"]).code, 3);

    let dir = scenario_copy();
    assert_eq!(fleetopt(dir.path(), &["--now", "yesterday", "report"]).code, 2);
    assert_eq!(fleetopt(dir.path(), &["no-such-command"]).code, 2);
}

#[test]
fn cap_limits_what_strategize_surfaces() {
    let dir = scenario_copy();
    for step in [&["ingest"][..], &["recommend"]] {
        ok(dir.path(), step);
    }
    ok(dir.path(), &["--cap", "1", "strategize"]);
    let bb = board(dir.path());
    let doc: StrategyDoc = bb.get("/strategy/2024-W31").unwrap().decode().unwrap();
    assert_eq!(doc.surfaced.len(), 1);
    assert_eq!(doc.retained.len(), 2);
    assert!(doc.surfaced[0].score >= doc.retained[0].score);
    let surfaced = recs(&bb).into_iter().filter(|r| r.status == Status::Surfaced).count();
    assert_eq!(surfaced, 1);
}

/// Telemetry for the week after the scenario, with requests matching the
/// new flavor.
fn next_week_telemetry(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            out.push_str(line);
            out.push('\n');
            continue;
        }
        let mut cols: Vec<String> = line.split(',').map(str::to_string).collect();
        cols[1] = format_rfc3339(parse_rfc3339(&cols[1]).unwrap() + WEEK_MS);
        if cols[0] == SCENARIO_VM {
            for (c, v) in [(4, "4"), (5, "16"), (6, "4"), (7, "16")] {
                cols[c] = v.into();
            }
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    fs::write(path, out).unwrap();
}

#[test]
fn applied_resize_does_not_come_back_next_week() {
    let dir = scenario_copy();
    ok(dir.path(), &["pipeline", "--approve-all"]);
    next_week_telemetry(&dir.path().join("telemetry.csv"));
    ok(dir.path(), &["--now", "2024-08-09T12:00:00Z", "pipeline", "--approve-all"]);
    let bb = board(dir.path());
    let next: Vec<_> = recs(&bb).into_iter().filter(|r| r.window_id == "2024-W32" && r.agent == "rightsizing").collect();
    assert!(next.is_empty(), "churn: {next:?}");
    assert_eq!(read_audit(&dir.path().join("state/audit.log")).unwrap().len(), 1);
}

#[test]
fn simulate_writes_metrics_and_curve() {
    let dir = scenario_copy();
    ok(dir.path(), &["simulate", "--n-vms", "40", "--days", "21"]);
    let report: RunReport =
        serde_json::from_slice(&fs::read(dir.path().join("runs/0001-simulate.json")).unwrap()).unwrap();
    let policies = report.result["policies"].as_array().unwrap();
    assert_eq!(policies.len(), 4);
    for field in [
        "util_cpu_p25_before",
        "util_cpu_p25_after",
        "util_mem_p25_before",
        "util_mem_p25_after",
        "theoretical_cpu_p25",
        "theoretical_mem_p25",
        "wasted_vcores",
        "recommendations_total",
        "recommendations_applied",
        "error_rate",
    ] {
        assert!(policies.iter().all(|p| p.get(field).is_some_and(|v| v.is_number())), "missing {field}");
    }
    let csv = fs::read_to_string(dir.path().join("runs/0001-simulate-ablation.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "fraction_applied,fraction_of_benefit");
    assert_eq!(lines.len(), 102);
    assert_eq!(lines[1], "0,0");
    assert_eq!(lines[101], "1,1");
}
