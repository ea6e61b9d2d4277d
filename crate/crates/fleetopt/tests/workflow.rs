mod common;

use std::fs;

use common::{scenario_board, scenario_catalog, scenario_now, SCENARIO_VM};
use fleetopt::blackboard::Blackboard;
use fleetopt::observer::ingest_inventory;
use fleetopt::rightsizing::{recommend, RightsizingConfig};
use fleetopt::workflow::{
    apply_patch, emit_proposal, find_recommendation, ingest_feedback, read_audit, read_metadata, resource_key,
    store_recommendation, EmitOutcome, FleetState, Mode, WorkflowError,
};
use fleetopt_core::{FieldValue, PatchOp, Platform, Recommendation, Status};

/// The scenario recommendation, surfaced and stored.
fn surfaced() -> (Blackboard, Recommendation) {
    let bb = scenario_board();
    let mut rec = recommend(&bb, &scenario_catalog(), &RightsizingConfig::default(), scenario_now())
        .unwrap()
        .written
        .remove(0);
    rec.transition(Status::Surfaced).unwrap();
    store_recommendation(&bb, &mut rec, 1).unwrap();
    (bb, rec)
}

fn fleet() -> FleetState {
    let handles = ingest_inventory(&common::read_fixture("inventory.json")).unwrap();
    FleetState::from_inventory(&handles, &scenario_catalog())
}

#[test]
fn proposal_directory_has_patch_summary_and_metadata() {
    let (_, rec) = surfaced();
    let repo = tempfile::tempdir().unwrap();
    let out = emit_proposal(&rec, 1.25, repo.path(), &rec.window_id, scenario_now()).unwrap();
    let EmitOutcome::Emitted(a) = out else { panic!("expected a fresh emission") };
    assert_eq!(a.directory, repo.path().join("proposals/2024-W31").join(&rec.id));

    let patch: Vec<PatchOp> = serde_json::from_slice(&fs::read(&a.patch_file).unwrap()).unwrap();
    assert_eq!(patch[0].path, "flavor");
    assert_eq!(patch[0].old, FieldValue::Text("m1.large".into()));
    assert_eq!(patch[0].new, FieldValue::Text("m1.medium".into()));

    let summary = fs::read_to_string(&a.summary_file).unwrap();
    assert!(summary.contains("m1.large to m1.medium"));
    assert!(summary.contains("P95") && summary.contains("forecast"));
    for e in &rec.evidence {
        assert!(summary.contains(&format!("{}@{}", e.key, e.version)));
    }
    let meta = read_metadata(&a).unwrap();
    assert_eq!(meta.recommendation, rec);
    assert_eq!(meta.score, 1.25);
    assert_eq!(meta.emitted_at, "2024-08-02T12:00:00Z");
}

#[test]
fn emitting_twice_changes_nothing() {
    let (_, rec) = surfaced();
    let repo = tempfile::tempdir().unwrap();
    let first = emit_proposal(&rec, 1.0, repo.path(), &rec.window_id, scenario_now()).unwrap();
    let before = fs::read(&first.artifact().metadata_file).unwrap();
    let second = emit_proposal(&rec, 9.0, repo.path(), &rec.window_id, scenario_now() + 1000).unwrap();
    assert!(matches!(second, EmitOutcome::AlreadyEmitted(_)));
    assert_eq!(fs::read(&second.artifact().metadata_file).unwrap(), before);
    assert_eq!(fs::read_dir(repo.path().join("proposals/2024-W31")).unwrap().count(), 1);
}

#[test]
fn ten_recommendations_ten_directories() {
    let (_, base) = surfaced();
    let repo = tempfile::tempdir().unwrap();
    for i in 0..10 {
        let mut rec = base.clone();
        rec.id = format!("{}-{i}", base.id);
        emit_proposal(&rec, 1.0, repo.path(), "2024-W31", scenario_now()).unwrap();
    }
    let dirs: Vec<_> = fs::read_dir(repo.path().join("proposals/2024-W31")).unwrap().map(|e| e.unwrap()).collect();
    assert_eq!(dirs.len(), 10);
    assert!(dirs.iter().all(|d| d.path().join("patch.json").exists()));
}

#[test]
fn pending_recommendations_are_not_emitted() {
    let (_, mut rec) = surfaced();
    rec.status = Status::Pending;
    let repo = tempfile::tempdir().unwrap();
    assert!(matches!(emit_proposal(&rec, 1.0, repo.path(), "w", 0), Err(WorkflowError::NotSurfaced(_))));
    assert!(!repo.path().join("proposals").exists());
}

#[test]
fn leftover_staging_directory_is_replaced() {
    let (_, rec) = surfaced();
    let repo = tempfile::tempdir().unwrap();
    let staging = repo.path().join("proposals/2024-W31").join(format!(".tmp-{}", rec.id));
    fs::create_dir_all(&staging).unwrap();
    fs::write(staging.join("patch.json"), "half").unwrap();
    let out = emit_proposal(&rec, 1.0, repo.path(), "2024-W31", scenario_now()).unwrap();
    assert!(matches!(out, EmitOutcome::Emitted(_)));
    assert!(!staging.exists());
    assert_eq!(fs::read_dir(&out.artifact().directory).unwrap().count(), 3);
}

fn feedback_json(entries: &[(&str, &str)]) -> String {
    let items: Vec<_> = entries
        .iter()
        .map(|(id, action)| serde_json::json!({"rec_id": id, "action": action, "actor": "alice", "at": "2024-08-02T13:00:00Z"}))
        .collect();
    serde_json::to_string(&items).unwrap()
}

#[test]
fn approval_updates_status_and_keeps_the_record() {
    let (bb, rec) = surfaced();
    let out = ingest_feedback(&feedback_json(&[("nope", "approved"), (&rec.id, "approved")]), &bb).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.diagnostics.len(), 1);
    assert!(out.diagnostics[0].contains("not on the blackboard"));
    let (stored, _, version) = find_recommendation(&bb, &rec.id).unwrap();
    assert_eq!((stored.status, version), (Status::Approved, 3));
    assert!(bb.get(&format!("/feedback/{}", rec.id)).is_some());
}

#[test]
fn malformed_feedback_is_skipped() {
    let (bb, rec) = surfaced();
    let out = ingest_feedback(&feedback_json(&[(&rec.id, "modified")]), &bb).unwrap();
    assert!(out.records.is_empty());
    assert_eq!(out.diagnostics.len(), 1);
    assert_eq!(find_recommendation(&bb, &rec.id).unwrap().0.status, Status::Surfaced);
    assert!(ingest_feedback("{}", &bb).is_err());
}

#[test]
fn approved_patch_changes_the_flavor_and_is_audited() {
    let (bb, rec) = surfaced();
    ingest_feedback(&feedback_json(&[(&rec.id, "approved")]), &bb).unwrap();
    let (mut rec, _, _) = find_recommendation(&bb, &rec.id).unwrap();
    let mut state = fleet();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.log");
    apply_patch(&mut rec, &mut state, Mode::Operator, None, &log, "alice", scenario_now()).unwrap();
    assert_eq!(rec.status, Status::Applied);
    assert_eq!(state.resources[&resource_key(Platform::Vm, SCENARIO_VM)].flavor, "m1.medium");
    let audit = read_audit(&log).unwrap();
    assert_eq!(audit.len(), 1);
    assert_eq!((audit[0].rec_id.as_str(), audit[0].actor.as_str()), (rec.id.as_str(), "alice"));
}

#[test]
fn drifted_resource_is_a_stale_target() {
    let (_, mut rec) = surfaced();
    rec.transition(Status::Approved).unwrap();
    let mut state = fleet();
    state.resources.get_mut(&resource_key(Platform::Vm, SCENARIO_VM)).unwrap().flavor = "m1.small".into();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.log");
    let err = apply_patch(&mut rec, &mut state, Mode::Operator, None, &log, "alice", 0).unwrap_err();
    assert!(matches!(err, WorkflowError::StaleTarget { .. }));
    assert_eq!(rec.status, Status::Approved);
    assert!(read_audit(&log).unwrap().is_empty());
}

#[test]
fn operator_mode_needs_approval_but_auto_does_not() {
    let (_, rec) = surfaced();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.log");
    let mut state = fleet();
    let mut r = rec.clone();
    assert!(matches!(
        apply_patch(&mut r, &mut state, Mode::Operator, None, &log, "alice", 0),
        Err(WorkflowError::NotApplicable { .. })
    ));
    let mut r = rec.clone();
    apply_patch(&mut r, &mut state, Mode::Auto, None, &log, "auto", 0).unwrap();
    assert_eq!(r.status, Status::Applied);
    assert_eq!(read_audit(&log).unwrap()[0].mode, Mode::Auto);
}

#[test]
fn modified_patch_wins_over_the_proposal() {
    let (_, mut rec) = surfaced();
    rec.transition(Status::Modified).unwrap();
    let custom = vec![PatchOp {
        resource_id: SCENARIO_VM.into(),
        path: "flavor".into(),
        old: FieldValue::Text("m1.large".into()),
        new: FieldValue::Text("m1.small".into()),
    }];
    let mut state = fleet();
    let dir = tempfile::tempdir().unwrap();
    apply_patch(&mut rec, &mut state, Mode::Operator, Some(&custom), &dir.path().join("a.log"), "bob", 0).unwrap();
    assert_eq!(state.resources[&resource_key(Platform::Vm, SCENARIO_VM)].flavor, "m1.small");
}
