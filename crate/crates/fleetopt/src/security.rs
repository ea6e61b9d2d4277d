//! The security agent: scan parsing, prompt construction and remediation
//! generation through a pluggable text generator.
//!
//! Scan reports follow the shape of kubescape's JSON output, reduced to the
//! fields the agent reads:
//!
//! ```json
//! {"scanID": "scan-1", "generationTime": "2024-08-01T10:00:00Z",
//!  "controls": [{"controlID": "C-0009", "name": "Resource limits",
//!                "severity": "high", "docLink": "https://...",
//!                "remediation": "Set resources.limits",
//!                "resources": [{"kind": "Deployment", "name": "web",
//!                               "namespace": "shop", "status": "failed"}]}]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fleetopt_core::recommendation::content_id;
use fleetopt_core::strategy::is_suppressed;
use fleetopt_core::time::WEEK_MS;
use fleetopt_core::{
    EvidenceRef, ImpactVector, Millis, Platform, Recommendation, Remediation, ResourceHandle,
    Severity, Status,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackboard::{Blackboard, BlackboardError};
use crate::rightsizing::read_feedback;
use crate::timefmt;

pub const AGENT: &str = "security";
pub const SECURITY_PREFIX: &str = "/observations/security/";
pub const CURSOR_KEY: &str = "/agents/security/cursor";
pub const PROMPT_SENTENCE: &str = "I did run a kubescape scan and it identified the following problem. Please give me a step by step guide on how to resolve this:";

#[derive(Debug, Error)]
pub enum SecurityError {
    #[error("scan report does not parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Blackboard(#[from] BlackboardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityObservation {
    pub check_name: String,
    pub resource_name: String,
    pub resource_kind: String,
    pub namespace: String,
    pub severity: Severity,
    pub doc_link: String,
    pub remediation_hint: String,
    pub scanned_at: Millis,
    pub scan_id: String,
}

impl SecurityObservation {
    pub fn key(&self) -> String {
        let tag = content_id(&[&self.check_name, &self.resource_kind, &self.namespace, &self.resource_name]);
        format!("{SECURITY_PREFIX}{}/{}", self.scan_id, tag)
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ScanReport {
    #[serde(rename = "scanID")]
    scan_id: String,
    generation_time: String,
    #[serde(default)]
    controls: Vec<ScanControl>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ScanControl {
    #[serde(rename = "controlID", default)]
    control_id: String,
    name: String,
    severity: String,
    #[serde(default)]
    doc_link: String,
    #[serde(default)]
    remediation: String,
    #[serde(default)]
    resources: Vec<ScanResource>,
}

#[derive(Debug, Deserialize)]
struct ScanResource {
    kind: String,
    name: String,
    #[serde(default)]
    namespace: String,
    status: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScanParse {
    pub observations: Vec<SecurityObservation>,
    pub passed: usize,
    pub diagnostics: Vec<String>,
}

fn parse_severity(s: &str) -> Option<Severity> {
    match s.to_ascii_lowercase().as_str() {
        "low" => Some(Severity::Low),
        "medium" => Some(Severity::Medium),
        "high" => Some(Severity::High),
        "critical" => Some(Severity::Critical),
        _ => None,
    }
}

/// One observation per failed (control, resource) pair; passing results are
/// only counted.
pub fn parse_scan_report(text: &str) -> Result<ScanParse, SecurityError> {
    let report: ScanReport = serde_json::from_str(text).map_err(|e| SecurityError::Parse(e.to_string()))?;
    let scanned_at = timefmt::parse_rfc3339(&report.generation_time)
        .map_err(|e| SecurityError::Parse(format!("generationTime: {e}")))?;
    let mut out = ScanParse::default();
    let mut seen = BTreeSet::new();
    for control in report.controls {
        let severity = parse_severity(&control.severity).ok_or_else(|| {
            SecurityError::Parse(format!("control {:?}: unknown severity {:?}", control.name, control.severity))
        })?;
        let check_name = if control.name.is_empty() { control.control_id.clone() } else { control.name.clone() };
        for res in control.resources {
            if !res.status.eq_ignore_ascii_case("failed") {
                out.passed += 1;
                continue;
            }
            if check_name.is_empty() || res.name.is_empty() {
                out.diagnostics.push(format!("control {:?}: failed result without check or resource name", control.control_id));
                continue;
            }
            let tuple = (check_name.clone(), res.kind.clone(), res.name.clone(), res.namespace.clone());
            if !seen.insert(tuple) {
                out.diagnostics.push(format!(
                    "duplicate failed check {:?} on {}/{} in scan {}",
                    check_name, res.kind, res.name, report.scan_id
                ));
                continue;
            }
            out.observations.push(SecurityObservation {
                check_name: check_name.clone(),
                resource_name: res.name,
                resource_kind: res.kind,
                namespace: res.namespace,
                severity,
                doc_link: control.doc_link.clone(),
                remediation_hint: control.remediation.clone(),
                scanned_at,
                scan_id: report.scan_id.clone(),
            });
        }
    }
    Ok(out)
}

pub fn post_security_observations(
    bb: &Blackboard,
    observations: &[SecurityObservation],
) -> Result<usize, BlackboardError> {
    for o in observations {
        let value = serde_json::to_value(o)?;
        bb.update(&o.key(), crate::observer::POST_ATTEMPTS, |_| Ok(value.clone()))?;
    }
    Ok(observations.len())
}

/// The fixed sentence, a blank line, the observation as JSON, and the
/// documentation text after another blank line when there is any.
pub fn build_prompt(obs: &SecurityObservation, doc_text: Option<&str>) -> String {
    let body = serde_json::to_string_pretty(obs).expect("observation serializes");
    let mut prompt = format!("{PROMPT_SENTENCE}\n\n{body}");
    if let Some(doc) = doc_text.filter(|d| !d.trim().is_empty()) {
        prompt.push_str("\n\n");
        prompt.push_str(doc);
    }
    prompt
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenerationError {
    #[error("text generation timed out after {0:?}")]
    Timeout(Duration),
    #[error("text generation failed: {0}")]
    Client(String),
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError>;
}

/// Returns a canned guide for the check named in the prompt.
#[derive(Debug, Clone, Default)]
pub struct StubGenerator {
    pub guides: BTreeMap<String, String>,
    pub default_guide: Option<String>,
    pub delay: Option<Duration>,
}

impl StubGenerator {
    pub fn new(guides: BTreeMap<String, String>) -> Self {
        StubGenerator { guides, default_guide: None, delay: None }
    }
}

impl TextGenerator for StubGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError> {
        if let Some(d) = self.delay {
            thread::sleep(d);
        }
        let check = prompt
            .split("\n\n")
            .nth(1)
            .and_then(|body| serde_json::from_str::<SecurityObservation>(body).ok())
            .map(|o| o.check_name);
        let guide = check.and_then(|c| self.guides.get(&c).cloned()).or_else(|| self.default_guide.clone());
        Ok(guide.unwrap_or_default())
    }
}

/// Posts `{"prompt": ...}` to `endpoint` and reads `{"text": ...}` back.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    pub endpoint: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct HttpReply {
    text: String,
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenerationError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "prompt": prompt }))
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => GenerationError::Timeout(self.timeout),
                other => GenerationError::Client(other.to_string()),
            })?;
        let reply: HttpReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| GenerationError::Client(e.to_string()))?;
        Ok(reply.text)
    }
}

/// Calls the generator on a helper thread and gives up after `timeout`. An
/// empty reply counts as a client error.
pub fn generate_remediation(
    prompt: &str,
    client: Arc<dyn TextGenerator>,
    timeout: Duration,
) -> Result<String, GenerationError> {
    let (tx, rx) = mpsc::channel();
    let prompt = prompt.to_string();
    thread::spawn(move || {
        let _ = tx.send(client.generate(&prompt));
    });
    match rx.recv_timeout(timeout) {
        Ok(Ok(text)) if !text.trim().is_empty() => Ok(text),
        Ok(Ok(_)) => Err(GenerationError::Client("empty response".into())),
        Ok(Err(e)) => Err(e),
        Err(mpsc::RecvTimeoutError::Timeout) => Err(GenerationError::Timeout(timeout)),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(GenerationError::Client("generator thread died".into())),
    }
}

/// Documentation fixtures: `<dir>/<content_id(doc_link)>.txt`.
#[derive(Debug, Clone)]
pub struct DocStore {
    dir: Option<PathBuf>,
}

impl DocStore {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        DocStore { dir: Some(dir.as_ref().to_path_buf()) }
    }

    pub fn empty() -> Self {
        DocStore { dir: None }
    }

    pub fn file_name(doc_link: &str) -> String {
        format!("{}.txt", content_id(&[doc_link]))
    }

    pub fn lookup(&self, doc_link: &str) -> Option<String> {
        if doc_link.is_empty() {
            return None;
        }
        let path = self.dir.as_ref()?.join(Self::file_name(doc_link));
        fs::read_to_string(path).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SecurityConfig {
    pub severity_magnitude: BTreeMap<Severity, f64>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub suppression_window_ms: Millis,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        SecurityConfig {
            severity_magnitude: [Severity::Low, Severity::Medium, Severity::High, Severity::Critical]
                .into_iter()
                .map(|s| (s, s.default_magnitude()))
                .collect(),
            timeout_ms: 10_000,
            max_in_flight: 4,
            suppression_window_ms: WEEK_MS,
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct SecurityOutcome {
    pub written: Vec<Recommendation>,
    pub suppressed: usize,
    pub diagnostics: Vec<String>,
}

fn excerpt(doc: &str) -> String {
    let trimmed = doc.trim();
    match trimmed.char_indices().nth(280) {
        Some((i, _)) => format!("{}...", &trimmed[..i]),
        None => trimmed.to_string(),
    }
}

/// Handles every security observation written since the agent's cursor.
pub fn recommend_security(
    bb: &Blackboard,
    docs: &DocStore,
    client: Arc<dyn TextGenerator>,
    cfg: &SecurityConfig,
    now: Millis,
) -> Result<SecurityOutcome, BlackboardError> {
    let mut out = SecurityOutcome::default();
    let cursor = bb.get(CURSOR_KEY);
    let since = cursor.as_ref().and_then(|r| r.value.get("revision")).and_then(|v| v.as_u64()).unwrap_or(0);
    let head = bb.revision();

    let mut latest: BTreeMap<String, (SecurityObservation, u64)> = BTreeMap::new();
    for rec in bb.changes_since(since)? {
        if !rec.key.starts_with(SECURITY_PREFIX) || rec.store_revision > head {
            continue;
        }
        match rec.decode::<SecurityObservation>() {
            Ok(o) => {
                latest.insert(rec.key.clone(), (o, rec.version));
            }
            Err(e) => out.diagnostics.push(e.to_string()),
        }
    }

    let feedback = read_feedback(bb);
    let window_id = timefmt::iso_week_id(now);
    let timeout = Duration::from_millis(cfg.timeout_ms);
    let jobs: Vec<(String, SecurityObservation, u64, Option<String>, String)> = latest
        .into_iter()
        .map(|(key, (obs, version))| {
            let doc = docs.lookup(&obs.doc_link);
            let prompt = build_prompt(&obs, doc.as_deref());
            (key, obs, version, doc, prompt)
        })
        .collect();

    let mut results: Vec<Result<String, GenerationError>> = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(cfg.max_in_flight.max(1)) {
        let batch: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|job| {
                    let client = client.clone();
                    s.spawn(move || generate_remediation(&job.4, client, timeout))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(GenerationError::Client("panicked".into()))))
                .collect()
        });
        results.extend(batch);
    }

    for ((key, obs, version, doc, _), generated) in jobs.into_iter().zip(results) {
        let (steps, used_fallback, failure) = match generated {
            Ok(text) => (text, false, None),
            Err(e) => (obs.remediation_hint.clone(), true, Some(e)),
        };
        let steps = if steps.trim().is_empty() {
            format!("Resolve the failed check \"{}\" on {} {}.", obs.check_name, obs.resource_kind, obs.resource_name)
        } else {
            steps
        };
        let magnitude = cfg
            .severity_magnitude
            .get(&obs.severity)
            .copied()
            .unwrap_or_else(|| obs.severity.default_magnitude());
        let id = content_id(&[AGENT, &obs.check_name, &obs.resource_kind, &obs.namespace, &obs.resource_name, &window_id]);
        if is_suppressed(&id, &feedback, now, cfg.suppression_window_ms) {
            out.suppressed += 1;
            continue;
        }
        let mut rationale = format!(
            "Failed check \"{}\" ({} severity) on {} {}/{} in scan {}. Documentation: {}.",
            obs.check_name,
            obs.severity.as_str(),
            obs.resource_kind,
            obs.namespace,
            obs.resource_name,
            obs.scan_id,
            if obs.doc_link.is_empty() { "none" } else { &obs.doc_link },
        );
        if doc.is_none() {
            rationale.push_str(" No local documentation text; prompt built from the observation only.");
        }
        if let Some(e) = &failure {
            rationale.push_str(&format!(" Generation failed ({e}); steps fall back to the scanner's remediation hint."));
        }
        let rec = Recommendation {
            id,
            version: 1,
            agent: AGENT.into(),
            handle: ResourceHandle {
                platform: Platform::Container,
                id: obs.resource_name.clone(),
                project: obs.namespace.clone(),
                owner: String::new(),
                flavor_name: String::new(),
                labels: [("kind".to_string(), obs.resource_kind.clone())].into_iter().collect(),
            },
            current_flavor: None,
            proposed_flavor: None,
            patch: Vec::new(),
            impact: ImpactVector { security: magnitude, ..Default::default() }.clamped(),
            rationale,
            evidence: vec![EvidenceRef { key: key.clone(), version }],
            status: Status::Pending,
            window_id: window_id.clone(),
            created_at: now,
            metrics: BTreeMap::new(),
            remediation: Some(Remediation {
                check_name: obs.check_name.clone(),
                severity: obs.severity,
                steps,
                doc_link: obs.doc_link.clone(),
                doc_excerpt: doc.as_deref().map(excerpt).unwrap_or_default(),
                used_fallback,
            }),
            notes: Vec::new(),
        };
        match bb.put_json(&rec.key(), &rec, Some(0)) {
            Ok(_) => out.written.push(rec),
            Err(BlackboardError::VersionConflict { .. }) => {}
            Err(e) => return Err(e),
        }
    }

    bb.update(CURSOR_KEY, crate::observer::POST_ATTEMPTS, |_| Ok(serde_json::json!({ "revision": head })))?;
    Ok(out)
}
