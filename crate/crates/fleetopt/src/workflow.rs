//! Proposal artifacts, operator feedback and patch application.
//!
//! A surfaced recommendation becomes a directory
//! `proposals/<window>/<rec-id>/` with
//!
//! * `patch.json`: array of `{resource_id, path, old, new}`;
//! * `SUMMARY.md`: rationale, impact table, evidence and links;
//! * `metadata.json`: `{"recommendation": <full record>, "score": f64,
//!   "emitted_at": "<RFC 3339>"}`.
//!
//! The directory is assembled under a temporary name and renamed into place,
//! so a reader sees either nothing or all three files.
//!
//! Feedback files are JSON arrays of
//! `{"rec_id", "action": "approved"|"rejected"|"modified", "actor", "at", "modified_patch"?}`
//! with `at` in RFC 3339.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fleetopt_core::{
    FeedbackAction, FeedbackRecord, FieldValue, Millis, Objective, PatchOp, Platform, Recommendation,
    ResourceHandle, Status,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackboard::{Blackboard, BlackboardError};
use crate::rightsizing::FEEDBACK_PREFIX;
use crate::timefmt;

pub const RECOMMENDATION_PREFIX: &str = "/recommendations/";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("recommendation {0} is not surfaced")]
    NotSurfaced(String),
    #[error("recommendation {0} is not on the blackboard")]
    UnknownRecommendation(String),
    #[error("resource {resource} is {actual:?} but the recommendation expects {expected:?}")]
    StaleTarget { resource: String, expected: Option<String>, actual: Option<String> },
    #[error("recommendation {id} cannot be applied from status {status}")]
    NotApplicable { id: String, status: &'static str },
    #[error("malformed feedback: {0}")]
    Malformed(String),
    #[error(transparent)]
    Blackboard(#[from] BlackboardError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalMetadata {
    pub recommendation: Recommendation,
    pub score: f64,
    pub emitted_at: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalArtifact {
    pub rec_id: String,
    pub directory: PathBuf,
    pub patch_file: PathBuf,
    pub summary_file: PathBuf,
    pub metadata_file: PathBuf,
}

impl ProposalArtifact {
    fn at(dir: PathBuf, rec_id: &str) -> Self {
        ProposalArtifact {
            rec_id: rec_id.to_string(),
            patch_file: dir.join("patch.json"),
            summary_file: dir.join("SUMMARY.md"),
            metadata_file: dir.join("metadata.json"),
            directory: dir,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmitOutcome {
    Emitted(ProposalArtifact),
    /// The directory already existed; nothing was written.
    AlreadyEmitted(ProposalArtifact),
}

impl EmitOutcome {
    pub fn artifact(&self) -> &ProposalArtifact {
        match self {
            EmitOutcome::Emitted(a) | EmitOutcome::AlreadyEmitted(a) => a,
        }
    }
}

fn field(v: &FieldValue) -> String {
    match v {
        FieldValue::Number(n) => format!("{n}"),
        FieldValue::Text(t) => t.clone(),
    }
}

pub fn render_summary(rec: &Recommendation, score: f64) -> String {
    let mut s = String::new();
    let title = match (&rec.current_flavor, &rec.proposed_flavor) {
        (Some(c), Some(p)) => format!("Resize {} {} from {c} to {p}", rec.handle.platform.as_str(), rec.handle.id),
        _ => match &rec.remediation {
            Some(r) => format!("Remediate \"{}\" on {}", r.check_name, rec.handle.id),
            None => format!("Change {}", rec.handle.id),
        },
    };
    let _ = writeln!(s, "# {title}\n");
    let _ = writeln!(s, "- id: `{}`", rec.id);
    let _ = writeln!(s, "- agent: {}", rec.agent);
    let _ = writeln!(s, "- window: {}", rec.window_id);
    let _ = writeln!(s, "- project: {}", rec.handle.project);
    let _ = writeln!(s, "- owner: {}", rec.handle.owner);
    let _ = writeln!(s, "- score: {score:.6}\n");
    let _ = writeln!(s, "## Rationale\n\n{}\n", rec.rationale);
    let _ = writeln!(s, "## Impact (fraction of cluster capacity)\n");
    let _ = writeln!(s, "| objective | impact |\n|---|---|");
    for o in Objective::ALL {
        let _ = writeln!(s, "| {} | {:+.6} |", o.as_str(), rec.impact.get(o));
    }
    if !rec.patch.is_empty() {
        let _ = writeln!(s, "\n## Patch\n\n| resource | path | old | new |\n|---|---|---|---|");
        for op in &rec.patch {
            let _ = writeln!(s, "| {} | {} | {} | {} |", op.resource_id, op.path, field(&op.old), field(&op.new));
        }
    }
    if let Some(r) = &rec.remediation {
        let _ = writeln!(s, "\n## Remediation ({} severity)\n\n{}", r.severity.as_str(), r.steps);
        if !r.doc_link.is_empty() {
            let _ = writeln!(s, "\nDocumentation: <{}>", r.doc_link);
        }
        if r.used_fallback {
            let _ = writeln!(s, "\nSteps are the scanner's remediation hint; generation did not succeed.");
        }
    }
    let _ = writeln!(s, "\n## Evidence\n");
    for e in &rec.evidence {
        let _ = writeln!(s, "- `{}@{}`", e.key, e.version);
    }
    for n in &rec.notes {
        let _ = writeln!(s, "- note: {n}");
    }
    s
}

/// Writes the proposal directory for a surfaced recommendation. Emitting the
/// same id into the same window twice leaves the first directory untouched.
pub fn emit_proposal(
    rec: &Recommendation,
    score: f64,
    repo_root: &Path,
    window_id: &str,
    now: Millis,
) -> Result<EmitOutcome, WorkflowError> {
    if rec.status != Status::Surfaced {
        return Err(WorkflowError::NotSurfaced(rec.id.clone()));
    }
    let window_dir = repo_root.join("proposals").join(window_id);
    let final_dir = window_dir.join(&rec.id);
    if final_dir.exists() {
        return Ok(EmitOutcome::AlreadyEmitted(ProposalArtifact::at(final_dir, &rec.id)));
    }
    fs::create_dir_all(&window_dir)?;
    let tmp = window_dir.join(format!(".tmp-{}", rec.id));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    let staged = ProposalArtifact::at(tmp.clone(), &rec.id);
    fs::write(&staged.patch_file, serde_json::to_vec_pretty(&rec.patch)?)?;
    fs::write(&staged.summary_file, render_summary(rec, score))?;
    let meta = ProposalMetadata {
        recommendation: rec.clone(),
        score,
        emitted_at: timefmt::format_rfc3339(now),
    };
    fs::write(&staged.metadata_file, serde_json::to_vec_pretty(&meta)?)?;
    fs::rename(&tmp, &final_dir)?;
    Ok(EmitOutcome::Emitted(ProposalArtifact::at(final_dir, &rec.id)))
}

pub fn read_metadata(artifact: &ProposalArtifact) -> Result<ProposalMetadata, WorkflowError> {
    Ok(serde_json::from_slice(&fs::read(&artifact.metadata_file)?)?)
}

/// Finds a recommendation by id under any agent prefix.
pub fn find_recommendation(bb: &Blackboard, id: &str) -> Option<(Recommendation, String, u64)> {
    bb.list_prefix(RECOMMENDATION_PREFIX)
        .into_iter()
        .find(|r| r.key.rsplit('/').next() == Some(id))
        .and_then(|r| r.decode::<Recommendation>().ok().map(|rec| (rec, r.key, r.version)))
}

/// Writes a new version of a recommendation with compare-and-swap on the
/// version it was read at.
pub fn store_recommendation(bb: &Blackboard, rec: &mut Recommendation, read_version: u64) -> Result<(), BlackboardError> {
    rec.version = read_version + 1;
    bb.put_json(&rec.key(), rec, Some(read_version))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct FeedbackEntry {
    rec_id: String,
    action: FeedbackAction,
    actor: String,
    at: String,
    #[serde(default)]
    modified_patch: Option<Vec<PatchOp>>,
}

#[derive(Debug, Default, Clone)]
pub struct FeedbackOutcome {
    pub records: Vec<FeedbackRecord>,
    pub diagnostics: Vec<String>,
}

/// Validates each feedback entry, stores it under `/feedback/<rec-id>` and
/// moves the recommendation to the matching status. Bad entries become
/// diagnostics; the rest are still processed.
pub fn ingest_feedback(text: &str, bb: &Blackboard) -> Result<FeedbackOutcome, WorkflowError> {
    let entries: Vec<serde_json::Value> = serde_json::from_str(text)
        .map_err(|e| WorkflowError::Malformed(format!("feedback file: {e}")))?;
    let mut out = FeedbackOutcome::default();
    for (i, raw) in entries.into_iter().enumerate() {
        let entry: FeedbackEntry = match serde_json::from_value(raw) {
            Ok(e) => e,
            Err(e) => {
                out.diagnostics.push(format!("entry {i}: {}", WorkflowError::Malformed(e.to_string())));
                continue;
            }
        };
        let at = match timefmt::parse_rfc3339(&entry.at) {
            Ok(t) => t,
            Err(e) => {
                out.diagnostics.push(format!("entry {i}: {}", WorkflowError::Malformed(format!("at: {e}"))));
                continue;
            }
        };
        let record = FeedbackRecord {
            rec_id: entry.rec_id,
            action: entry.action,
            actor: entry.actor,
            at,
            modified_patch: entry.modified_patch,
        };
        if !record.is_well_formed() {
            out.diagnostics.push(format!(
                "entry {i}: {}",
                WorkflowError::Malformed("modified_patch must be present exactly when action is modified".into())
            ));
            continue;
        }
        let Some((mut rec, _, version)) = find_recommendation(bb, &record.rec_id) else {
            out.diagnostics.push(format!("entry {i}: {}", WorkflowError::UnknownRecommendation(record.rec_id.clone())));
            continue;
        };
        if let Err(e) = rec.transition(record.action.status()) {
            out.diagnostics.push(format!("entry {i}: {e}"));
            continue;
        }
        store_recommendation(bb, &mut rec, version)?;
        let key = format!("{FEEDBACK_PREFIX}{}", record.rec_id);
        let value = serde_json::to_value(&record)?;
        bb.update(&key, crate::observer::POST_ATTEMPTS, |_| Ok(value.clone()))?;
        out.records.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetResource {
    pub handle: ResourceHandle,
    pub flavor: String,
    /// Requests for containers; mirrors the flavor for VMs.
    pub cpu: f64,
    pub mem: f64,
}

/// Current configuration of every resource, keyed `platform/id`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FleetState {
    pub resources: BTreeMap<String, FleetResource>,
}

pub fn resource_key(platform: Platform, id: &str) -> String {
    format!("{}/{}", platform.as_str(), id)
}

impl FleetState {
    pub fn from_inventory(handles: &[ResourceHandle], catalog: &fleetopt_core::FlavorCatalog) -> Self {
        let resources = handles
            .iter()
            .map(|h| {
                let (cpu, mem) = catalog.get(&h.flavor_name).map_or((0.0, 0.0), |f| (f.cpu, f.mem));
                (
                    resource_key(h.platform, &h.id),
                    FleetResource { handle: h.clone(), flavor: h.flavor_name.clone(), cpu, mem },
                )
            })
            .collect();
        FleetState { resources }
    }

    pub fn load(path: &Path) -> Result<Self, WorkflowError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorkflowError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Operator,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub rec_id: String,
    pub resource: String,
    pub changes: Vec<PatchOp>,
    pub actor: String,
    pub mode: Mode,
    pub at: String,
}

pub fn append_audit(path: &Path, entry: &AuditEntry) -> Result<(), WorkflowError> {
    let mut line = serde_json::to_vec(entry)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    Ok(())
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditEntry>, WorkflowError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Applies a recommendation's patch (or the operator's modified patch) to
/// the fleet. In operator mode the recommendation must be approved or
/// modified; in auto mode a surfaced one is approved on the spot. The
/// resource must still have the flavor the recommendation was made against.
pub fn apply_patch(
    rec: &mut Recommendation,
    fleet: &mut FleetState,
    mode: Mode,
    modified_patch: Option<&[PatchOp]>,
    audit_log: &Path,
    actor: &str,
    now: Millis,
) -> Result<(), WorkflowError> {
    match (mode, rec.status) {
        (_, Status::Approved) | (_, Status::Modified) => {}
        (Mode::Auto, Status::Surfaced) => {
            rec.transition(Status::Approved).expect("surfaced -> approved");
        }
        (_, s) => return Err(WorkflowError::NotApplicable { id: rec.id.clone(), status: s.as_str() }),
    }
    let key = resource_key(rec.handle.platform, &rec.handle.id);
    let Some(res) = fleet.resources.get_mut(&key) else {
        return Err(WorkflowError::StaleTarget { resource: key, expected: rec.current_flavor.clone(), actual: None });
    };
    if let Some(expected) = &rec.current_flavor {
        if &res.flavor != expected {
            return Err(WorkflowError::StaleTarget {
                resource: key,
                expected: Some(expected.clone()),
                actual: Some(res.flavor.clone()),
            });
        }
    }
    let ops: Vec<PatchOp> = match (rec.status, modified_patch) {
        (Status::Modified, Some(p)) => p.to_vec(),
        _ => rec.patch.clone(),
    };
    for op in &ops {
        match (op.path.as_str(), &op.new) {
            ("flavor", FieldValue::Text(name)) => {
                res.flavor = name.clone();
                res.handle.flavor_name = name.clone();
            }
            ("resources.requests.cpu", FieldValue::Number(v)) => res.cpu = *v,
            ("resources.requests.memory_gib", FieldValue::Number(v)) => res.mem = *v,
            _ => {}
        }
    }
    rec.transition(Status::Applied).expect("approved or modified -> applied");
    append_audit(
        audit_log,
        &AuditEntry {
            rec_id: rec.id.clone(),
            resource: key,
            changes: ops,
            actor: actor.to_string(),
            mode,
            at: timefmt::format_rfc3339(now),
        },
    )?;
    Ok(())
}
