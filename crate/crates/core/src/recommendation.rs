//! The recommendation record shared by both agents, the strategizer and the
//! workflow adapter.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::time::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Platform {
    Vm,
    Container,
}

impl Platform {
    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Vm => "vm",
            Platform::Container => "container",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceHandle {
    pub platform: Platform,
    pub id: String,
    #[serde(default)]
    pub project: String,
    #[serde(default)]
    pub owner: String,
    pub flavor_name: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl ResourceHandle {
    /// `(platform, id)`, unique across the fleet.
    pub fn key(&self) -> (Platform, &str) {
        (self.platform, self.id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Reliability,
    Performance,
    Security,
    Cost,
    Sustainability,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Reliability,
        Objective::Performance,
        Objective::Security,
        Objective::Cost,
        Objective::Sustainability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Reliability => "reliability",
            Objective::Performance => "performance",
            Objective::Security => "security",
            Objective::Cost => "cost",
            Objective::Sustainability => "sustainability",
        }
    }
}

/// Projected per-objective change as a signed fraction of cluster capacity.
/// Positive means improvement.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImpactVector {
    pub reliability: f64,
    pub performance: f64,
    pub security: f64,
    pub cost: f64,
    pub sustainability: f64,
}

impl ImpactVector {
    pub fn get(&self, o: Objective) -> f64 {
        match o {
            Objective::Reliability => self.reliability,
            Objective::Performance => self.performance,
            Objective::Security => self.security,
            Objective::Cost => self.cost,
            Objective::Sustainability => self.sustainability,
        }
    }

    pub fn set(&mut self, o: Objective, v: f64) {
        match o {
            Objective::Reliability => self.reliability = v,
            Objective::Performance => self.performance = v,
            Objective::Security => self.security = v,
            Objective::Cost => self.cost = v,
            Objective::Sustainability => self.sustainability = v,
        }
    }

    pub fn clamped(mut self) -> Self {
        for o in Objective::ALL {
            self.set(o, self.get(o).clamp(-1.0, 1.0));
        }
        self
    }

    pub fn is_zero(&self) -> bool {
        Objective::ALL.iter().all(|o| self.get(*o) == 0.0)
    }

    /// Objective with the largest absolute component; ties go to the one
    /// that comes first in `priority`. `None` for the zero vector.
    pub fn dominant(&self, priority: &[Objective]) -> Option<Objective> {
        let mut best: Option<(Objective, f64)> = None;
        for &o in priority {
            let v = libm::fabs(self.get(o));
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((o, v));
            }
        }
        best.map(|(o, _)| o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    /// Default security-impact magnitude for this severity.
    pub fn default_magnitude(self) -> f64 {
        match self {
            Severity::Low => 0.1,
            Severity::Medium => 0.3,
            Severity::High => 0.6,
            Severity::Critical => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Low => "low",
            Severity::Medium => "medium",
            Severity::High => "high",
            Severity::Critical => "critical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Surfaced,
    Approved,
    Rejected,
    Modified,
    Applied,
}

impl Status {
    pub fn can_become(self, next: Status) -> bool {
        matches!(
            (self, next),
            (Status::Pending, Status::Surfaced)
                | (Status::Surfaced, Status::Approved)
                | (Status::Surfaced, Status::Rejected)
                | (Status::Surfaced, Status::Modified)
                | (Status::Approved, Status::Applied)
                | (Status::Modified, Status::Applied)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "pending",
            Status::Surfaced => "surfaced",
            Status::Approved => "approved",
            Status::Rejected => "rejected",
            Status::Modified => "modified",
            Status::Applied => "applied",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("recommendation {id} cannot move from {from:?} to {to:?}")]
pub struct TransitionError {
    pub id: String,
    pub from: Status,
    pub to: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
}

/// One field change in a configuration delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOp {
    pub resource_id: String,
    pub path: String,
    pub old: FieldValue,
    pub new: FieldValue,
}

/// A blackboard key and the version the recommendation was derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub key: String,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Remediation {
    pub check_name: String,
    pub severity: Severity,
    pub steps: String,
    pub doc_link: String,
    #[serde(default)]
    pub doc_excerpt: String,
    /// True when the generator failed and the scanner's hint stands in.
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub version: u64,
    pub agent: String,
    pub handle: ResourceHandle,
    pub current_flavor: Option<String>,
    pub proposed_flavor: Option<String>,
    pub patch: Vec<PatchOp>,
    pub impact: ImpactVector,
    pub rationale: String,
    pub evidence: Vec<EvidenceRef>,
    pub status: Status,
    pub window_id: String,
    pub created_at: Millis,
    /// Numbers the rationale cites, keyed by name.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remediation: Option<Remediation>,
    /// Annotations added after creation, e.g. by conflict resolution.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Recommendation {
    pub fn transition(&mut self, next: Status) -> Result<(), TransitionError> {
        if !self.status.can_become(next) {
            return Err(TransitionError { id: self.id.clone(), from: self.status, to: next });
        }
        self.status = next;
        Ok(())
    }

    /// Blackboard key the recommendation lives under.
    pub fn key(&self) -> String {
        alloc::format!("/recommendations/{}/{}", self.agent, self.id)
    }
}

/// Stable content id: SHA-256 over the parts joined by the unit separator,
/// first 16 bytes in hex.
pub fn content_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0x1f]);
        }
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    hex::encode(&digest[..16])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackAction {
    Approved,
    Rejected,
    Modified,
}

impl FeedbackAction {
    pub fn status(self) -> Status {
        match self {
            FeedbackAction::Approved => Status::Approved,
            FeedbackAction::Rejected => Status::Rejected,
            FeedbackAction::Modified => Status::Modified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub rec_id: String,
    pub action: FeedbackAction,
    pub actor: String,
    pub at: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_patch: Option<Vec<PatchOp>>,
}

impl FeedbackRecord {
    /// `modified` carries a patch and nothing else does.
    pub fn is_well_formed(&self) -> bool {
        !self.rec_id.is_empty()
            && (self.action == FeedbackAction::Modified) == self.modified_patch.is_some()
    }
}
