//! File-based inventory and telemetry adapters, window trimming, and posting
//! utilization observations to the blackboard.
//!
//! Inventory is a JSON document:
//!
//! ```json
//! {"resources": [{"platform": "vm", "id": "web-1", "project": "shop",
//!                 "owner": "team-a", "flavor_name": "m1.large",
//!                 "labels": {"image": "ubuntu-22.04"}}]}
//! ```
//!
//! Telemetry is CSV with the header
//! `resource_id,timestamp,cpu_used,mem_used,cpu_request,mem_request,cpu_limit,mem_limit`,
//! RFC 3339 UTC timestamps, cores for CPU and GiB for memory. A limit of 0
//! means unset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use fleetopt_core::time::DEFAULT_SAMPLING_MS;
use fleetopt_core::{Millis, Platform, ResourceHandle};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackboard::{Blackboard, BlackboardError};
use crate::timefmt;

pub const UTILIZATION_PREFIX: &str = "/observations/utilization/";
pub const POST_ATTEMPTS: usize = 5;

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("duplicate resource {platform}/{id}")]
    DuplicateResource { platform: &'static str, id: String },
    #[error("telemetry line {line} references unknown resource {id:?}")]
    UnknownResource { id: String, line: u64 },
    #[error("resource id {id:?} exists on more than one platform; telemetry cannot tell them apart")]
    AmbiguousResource { id: String },
    #[error("telemetry line {line}: timestamp for {id:?} does not increase")]
    NonMonotonicTimestamps { id: String, line: u64 },
    #[error("no samples for {id} in the window ending at {now}")]
    EmptyWindow { id: String, now: Millis },
    #[error(transparent)]
    Blackboard(#[from] BlackboardError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub at: Millis,
    pub cpu_used: f64,
    pub mem_used: f64,
    pub cpu_request: f64,
    pub mem_request: f64,
    pub cpu_limit: f64,
    pub mem_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationObservation {
    pub handle: ResourceHandle,
    pub window_start: Millis,
    pub window_end: Millis,
    pub sampling_period_ms: Millis,
    pub samples: Vec<TelemetrySample>,
}

impl UtilizationObservation {
    pub fn key(&self) -> String {
        utilization_key(&self.handle)
    }

    pub fn cpu_series(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.cpu_used).collect()
    }

    pub fn mem_series(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.mem_used).collect()
    }
}

pub fn utilization_key(handle: &ResourceHandle) -> String {
    format!("{UTILIZATION_PREFIX}{}/{}", handle.platform.as_str(), handle.id)
}

#[derive(Debug, Deserialize)]
struct InventoryDoc {
    #[serde(default)]
    resources: Vec<serde_json::Value>,
}

#[derive(Debug, Deserialize)]
struct InventoryRow {
    platform: Platform,
    id: String,
    #[serde(default)]
    project: String,
    #[serde(default)]
    owner: String,
    #[serde(alias = "flavor")]
    flavor_name: String,
    #[serde(default)]
    labels: BTreeMap<String, String>,
}

/// Parses an inventory document. An empty (or whitespace-only) input is an
/// empty inventory.
pub fn ingest_inventory(text: &str) -> Result<Vec<ResourceHandle>, ObserverError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let doc: InventoryDoc = serde_json::from_str(text).map_err(|e| ObserverError::Parse {
        context: "inventory".into(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(doc.resources.len());
    for (i, raw) in doc.resources.into_iter().enumerate() {
        let row: InventoryRow = serde_json::from_value(raw).map_err(|e| ObserverError::Parse {
            context: format!("inventory record {i}"),
            message: e.to_string(),
        })?;
        if row.id.is_empty() {
            return Err(ObserverError::Parse {
                context: format!("inventory record {i}"),
                message: "empty id".into(),
            });
        }
        if !seen.insert((row.platform, row.id.clone())) {
            return Err(ObserverError::DuplicateResource { platform: row.platform.as_str(), id: row.id });
        }
        out.push(ResourceHandle {
            platform: row.platform,
            id: row.id,
            project: row.project,
            owner: row.owner,
            flavor_name: row.flavor_name,
            labels: row.labels,
        });
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    resource_id: String,
    timestamp: String,
    cpu_used: f64,
    mem_used: f64,
    cpu_request: f64,
    mem_request: f64,
    cpu_limit: f64,
    mem_limit: f64,
}

/// Samples of one resource, in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceSamples {
    pub handle: ResourceHandle,
    pub samples: Vec<TelemetrySample>,
}

/// Reads telemetry CSV and groups it per resource, in inventory order.
/// Resources without samples are left out.
pub fn ingest_telemetry<R: Read>(
    source: R,
    handles: &[ResourceHandle],
) -> Result<Vec<ResourceSamples>, ObserverError> {
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ambiguous = BTreeSet::new();
    for (i, h) in handles.iter().enumerate() {
        if by_id.insert(h.id.as_str(), i).is_some() {
            ambiguous.insert(h.id.as_str());
        }
    }
    let mut grouped: Vec<Vec<TelemetrySample>> = vec![Vec::new(); handles.len()];
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| ObserverError::Parse { context: "telemetry header".into(), message: e.to_string() })?
        .clone();
    for result in reader.records() {
        let parse_err = |line: u64, e: csv::Error| ObserverError::Parse {
            context: format!("telemetry line {line}"),
            message: e.to_string(),
        };
        let record = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: CsvRow = record.deserialize(Some(&headers)).map_err(|e| parse_err(line, e))?;
        let idx = *by_id
            .get(row.resource_id.as_str())
            .ok_or_else(|| ObserverError::UnknownResource { id: row.resource_id.clone(), line })?;
        if ambiguous.contains(row.resource_id.as_str()) {
            return Err(ObserverError::AmbiguousResource { id: row.resource_id });
        }
        let at = timefmt::parse_rfc3339(&row.timestamp).map_err(|e| ObserverError::Parse {
            context: format!("telemetry line {line}"),
            message: format!("timestamp {:?}: {e}", row.timestamp),
        })?;
        let values = [row.cpu_used, row.mem_used, row.cpu_request, row.mem_request, row.cpu_limit, row.mem_limit];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ObserverError::Parse {
                context: format!("telemetry line {line}"),
                message: "usage, requests and limits must be finite and non-negative".into(),
            });
        }
        let samples = &mut grouped[idx];
        if samples.last().is_some_and(|s| s.at >= at) {
            return Err(ObserverError::NonMonotonicTimestamps { id: row.resource_id, line });
        }
        samples.push(TelemetrySample {
            at,
            cpu_used: row.cpu_used,
            mem_used: row.mem_used,
            cpu_request: row.cpu_request,
            mem_request: row.mem_request,
            cpu_limit: row.cpu_limit,
            mem_limit: row.mem_limit,
        });
    }
    Ok(handles
        .iter()
        .zip(grouped)
        .filter(|(_, s)| !s.is_empty())
        .map(|(h, samples)| ResourceSamples { handle: h.clone(), samples })
        .collect())
}

/// Keeps the samples in `[now - window, now]`.
pub fn build_observation(
    handle: &ResourceHandle,
    samples: &[TelemetrySample],
    window_ms: Millis,
    now: Millis,
    sampling_period_ms: Millis,
) -> Result<UtilizationObservation, ObserverError> {
    let start = now - window_ms;
    let kept: Vec<TelemetrySample> = samples.iter().filter(|s| s.at >= start && s.at <= now).copied().collect();
    if kept.is_empty() {
        return Err(ObserverError::EmptyWindow { id: handle.id.clone(), now });
    }
    Ok(UtilizationObservation {
        handle: handle.clone(),
        window_start: start,
        window_end: now,
        sampling_period_ms: if sampling_period_ms > 0 { sampling_period_ms } else { DEFAULT_SAMPLING_MS },
        samples: kept,
    })
}

/// One compare-and-swap write per observation, retried on conflict.
pub fn post_observations(
    bb: &Blackboard,
    observations: &[UtilizationObservation],
) -> Result<usize, ObserverError> {
    for obs in observations {
        let value = serde_json::to_value(obs).map_err(BlackboardError::from)?;
        bb.update(&obs.key(), POST_ATTEMPTS, |_| Ok(value.clone()))?;
    }
    Ok(observations.len())
}

/// All utilization observations on the blackboard with their versions.
pub fn read_observations(bb: &Blackboard) -> Vec<Result<(UtilizationObservation, String, u64), BlackboardError>> {
    bb.list_prefix(UTILIZATION_PREFIX)
        .into_iter()
        .map(|r| r.decode().map(|o| (o, r.key, r.version)))
        .collect()
}
