//! The rightsizing agent: stats, model selection, forecasts, breach
//! detection and catalog matching per resource, then one recommendation per
//! resource that should change flavor.

use std::collections::BTreeMap;

use fleetopt_core::catalog::CatalogError;
use fleetopt_core::recommendation::content_id;
use fleetopt_core::sizing::{BreachKind, ClusterCapacity, Thresholds};
use fleetopt_core::strategy::is_suppressed;
use fleetopt_core::time::WEEK_MS;
use fleetopt_core::{
    build_impact, compute_stats, detect_breach, forecast, required_allocation, select_model,
    BreachFinding, EvidenceRef, FeedbackRecord, FieldValue, Flavor, FlavorCatalog, Forecast,
    ForecastError, Millis, PatchOp, Platform, Recommendation, Requirement, ResourceHandle,
    SelectorConfig, SeriesStats, Status, StatsError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackboard::{Blackboard, BlackboardError};
use crate::observer::{read_observations, UtilizationObservation};
use crate::timefmt;

pub const AGENT: &str = "rightsizing";
pub const CLUSTER_METRICS_KEY: &str = "/metrics/cluster";
pub const FEEDBACK_PREFIX: &str = "/feedback/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RightsizingConfig {
    pub thresholds: Thresholds,
    pub buffer: f64,
    pub window_ms: Millis,
    pub horizon_ms: Millis,
    pub selector: SelectorConfig,
    /// Cluster capacity used to normalize impacts. Defaults to the summed
    /// allocation of the observed resources.
    pub cluster: Option<ClusterCapacity>,
    pub suppression_window_ms: Millis,
}

impl Default for RightsizingConfig {
    fn default() -> Self {
        RightsizingConfig {
            thresholds: Thresholds::default(),
            buffer: 0.10,
            window_ms: WEEK_MS,
            horizon_ms: WEEK_MS,
            selector: SelectorConfig::default(),
            cluster: None,
            suppression_window_ms: WEEK_MS,
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("flavor {0:?} is not in the catalog")]
    UnknownFlavor(String),
    #[error("cpu and memory series differ in length")]
    MismatchedSeries,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    /// No persistent breach.
    NoBreach,
    /// The nearest feasible flavor is the current one.
    NoChange,
    Resize(Flavor),
    /// Nothing in the catalog covers the requirement.
    NoFeasible,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub stats_cpu: SeriesStats,
    pub stats_mem: SeriesStats,
    pub forecast_cpu: Forecast,
    pub forecast_mem: Forecast,
    pub finding: BreachFinding,
    pub needed: Requirement,
    pub proposal: Proposal,
}

fn forecast_dim(
    series: &[f64],
    allocated: f64,
    cfg: &RightsizingConfig,
    origin: Millis,
    period_ms: Millis,
) -> Result<(SeriesStats, Forecast), AnalysisError> {
    let stats = compute_stats(series, allocated)?;
    let normalized: Vec<f64> = series.iter().map(|v| v / allocated).collect();
    let model = select_model(&normalized, period_ms, &cfg.selector)?;
    let fc = forecast(series, &model, origin, period_ms, cfg.horizon_ms)?;
    Ok((stats, fc))
}

/// Runs the per-resource pipeline on raw usage series (cores, GiB).
pub fn analyze(
    cpu: &[f64],
    mem: &[f64],
    current: &Flavor,
    catalog: &FlavorCatalog,
    cfg: &RightsizingConfig,
    origin: Millis,
    period_ms: Millis,
) -> Result<Analysis, AnalysisError> {
    if cpu.len() != mem.len() {
        return Err(AnalysisError::MismatchedSeries);
    }
    let (stats_cpu, forecast_cpu) = forecast_dim(cpu, current.cpu, cfg, origin, period_ms)?;
    let (stats_mem, forecast_mem) = forecast_dim(mem, current.mem, cfg, origin, period_ms)?;
    let finding = detect_breach(&stats_cpu, &stats_mem, &forecast_cpu, &forecast_mem, &cfg.thresholds);
    let (cpu_need, mem_need) =
        required_allocation(&stats_cpu, &stats_mem, &forecast_cpu, &forecast_mem, cfg.buffer);
    let needed = Requirement::new(cpu_need, mem_need);
    let proposal = if finding.kind == BreachKind::None {
        Proposal::NoBreach
    } else {
        match catalog.select(&needed, &current.name) {
            Ok(Some(f)) => Proposal::Resize(f.clone()),
            Ok(None) => Proposal::NoChange,
            Err(CatalogError::NoFeasibleFlavor { .. }) => Proposal::NoFeasible,
            Err(_) => Proposal::NoFeasible,
        }
    };
    Ok(Analysis { stats_cpu, stats_mem, forecast_cpu, forecast_mem, finding, needed, proposal })
}

/// Numbers a rightsizing rationale cites, keyed by name.
pub fn cited_metrics(a: &Analysis, buffer: f64) -> BTreeMap<String, f64> {
    [
        ("cpu_p95", a.stats_cpu.p95),
        ("cpu_mean", a.stats_cpu.mean),
        ("cpu_forecast_p95", a.forecast_cpu.p95_forecast),
        ("cpu_needed", a.needed.cpu),
        ("mem_p95", a.stats_mem.p95),
        ("mem_mean", a.stats_mem.mean),
        ("mem_forecast_p95", a.forecast_mem.p95_forecast),
        ("mem_needed", a.needed.mem),
        ("buffer", buffer),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn rationale(a: &Analysis, current: &Flavor, proposed: &Flavor, m: &BTreeMap<String, f64>) -> String {
    let dim = a.finding.dimension.map_or("none", |d| d.as_str());
    format!(
        "{kind} on {dim}. cpu: P95 {cpu_p95:.4} of {cur_cpu} cores, mean {cpu_mean:.4}, forecast P95 {cpu_fc:.4} ({cpu_model}). \
         mem: P95 {mem_p95:.4} of {cur_mem} GiB, mean {mem_mean:.4}, forecast P95 {mem_fc:.4} ({mem_model}). \
         Needed with buffer {buffer:.4}: {cpu_need:.4} cores, {mem_need:.4} GiB. \
         {cur} ({cur_cpu}C/{cur_mem}GiB) -> {prop} ({prop_cpu}C/{prop_mem}GiB).",
        kind = a.finding.kind.as_str(),
        cpu_p95 = m["cpu_p95"],
        cpu_mean = m["cpu_mean"],
        cpu_fc = m["cpu_forecast_p95"],
        cpu_model = a.forecast_cpu.model.kind.as_str(),
        mem_p95 = m["mem_p95"],
        mem_mean = m["mem_mean"],
        mem_fc = m["mem_forecast_p95"],
        mem_model = a.forecast_mem.model.kind.as_str(),
        buffer = m["buffer"],
        cpu_need = m["cpu_needed"],
        mem_need = m["mem_needed"],
        cur = current.name,
        cur_cpu = current.cpu,
        cur_mem = current.mem,
        prop = proposed.name,
        prop_cpu = proposed.cpu,
        prop_mem = proposed.mem,
    )
}

pub fn rightsizing_id(handle: &ResourceHandle, current: &str, proposed: &str, window_id: &str) -> String {
    content_id(&[AGENT, handle.platform.as_str(), &handle.id, current, proposed, window_id])
}

fn patch_for(handle: &ResourceHandle, current: &Flavor, proposed: &Flavor) -> Vec<PatchOp> {
    let mut ops = vec![PatchOp {
        resource_id: handle.id.clone(),
        path: "flavor".into(),
        old: FieldValue::Text(current.name.clone()),
        new: FieldValue::Text(proposed.name.clone()),
    }];
    if handle.platform == Platform::Container {
        ops.push(PatchOp {
            resource_id: handle.id.clone(),
            path: "resources.requests.cpu".into(),
            old: FieldValue::Number(current.cpu),
            new: FieldValue::Number(proposed.cpu),
        });
        ops.push(PatchOp {
            resource_id: handle.id.clone(),
            path: "resources.requests.memory_gib".into(),
            old: FieldValue::Number(current.mem),
            new: FieldValue::Number(proposed.mem),
        });
    }
    ops
}

#[allow(clippy::too_many_arguments)]
pub fn build_recommendation(
    handle: &ResourceHandle,
    analysis: &Analysis,
    current: &Flavor,
    proposed: &Flavor,
    cluster: &ClusterCapacity,
    buffer: f64,
    evidence: Vec<EvidenceRef>,
    now: Millis,
) -> Recommendation {
    let window_id = timefmt::iso_week_id(now);
    let metrics = cited_metrics(analysis, buffer);
    Recommendation {
        id: rightsizing_id(handle, &current.name, &proposed.name, &window_id),
        version: 1,
        agent: AGENT.into(),
        handle: handle.clone(),
        current_flavor: Some(current.name.clone()),
        proposed_flavor: Some(proposed.name.clone()),
        patch: patch_for(handle, current, proposed),
        impact: build_impact(current, proposed, cluster, &analysis.finding),
        rationale: rationale(analysis, current, proposed, &metrics),
        evidence,
        status: Status::Pending,
        window_id,
        created_at: now,
        metrics,
        remediation: None,
        notes: Vec::new(),
    }
}

/// Document stored under `/metrics/cluster`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub capacity: ClusterCapacity,
    pub resources: usize,
    /// Current value per objective, keyed by objective name.
    pub current: BTreeMap<fleetopt_core::Objective, f64>,
}

#[derive(Debug, Default, Clone)]
pub struct RecommendOutcome {
    pub written: Vec<Recommendation>,
    /// Ids that were already on the blackboard from an earlier run.
    pub existing: Vec<String>,
    pub no_breach: usize,
    pub no_change: usize,
    pub suppressed: usize,
    pub diagnostics: Vec<String>,
}

pub fn read_feedback(bb: &Blackboard) -> Vec<FeedbackRecord> {
    bb.list_prefix(FEEDBACK_PREFIX).into_iter().filter_map(|r| r.decode().ok()).collect()
}

/// Summed allocation of the given resources.
pub fn fleet_capacity<'a>(
    handles: impl IntoIterator<Item = &'a ResourceHandle>,
    catalog: &FlavorCatalog,
) -> ClusterCapacity {
    let mut cap = ClusterCapacity { cpu: 0.0, mem: 0.0 };
    for h in handles {
        if let Some(f) = catalog.get(&h.flavor_name) {
            cap.cpu += f.cpu;
            cap.mem += f.mem;
        }
    }
    cap
}

/// Runs the agent over every utilization observation on the blackboard.
pub fn recommend(
    bb: &Blackboard,
    catalog: &FlavorCatalog,
    cfg: &RightsizingConfig,
    now: Millis,
) -> Result<RecommendOutcome, BlackboardError> {
    let mut out = RecommendOutcome::default();
    let mut observations: Vec<(UtilizationObservation, String, u64)> = Vec::new();
    for r in read_observations(bb) {
        match r {
            Ok(o) => observations.push(o),
            Err(e) => out.diagnostics.push(e.to_string()),
        }
    }
    let feedback = read_feedback(bb);
    let metrics = bb.get(CLUSTER_METRICS_KEY);
    let cluster = cfg
        .cluster
        .or_else(|| metrics.as_ref().and_then(|m| m.decode::<ClusterMetrics>().ok()).map(|m| m.capacity))
        .unwrap_or_else(|| fleet_capacity(observations.iter().map(|o| &o.0.handle), catalog));

    for (obs, key, version) in &observations {
        let handle = &obs.handle;
        let Some(current) = catalog.get(&handle.flavor_name) else {
            out.diagnostics.push(format!("{}: flavor {:?} not in catalog", handle.id, handle.flavor_name));
            continue;
        };
        let origin = obs.samples.last().map_or(obs.window_end, |s| s.at);
        let analysis = match analyze(
            &obs.cpu_series(),
            &obs.mem_series(),
            current,
            catalog,
            cfg,
            origin,
            obs.sampling_period_ms,
        ) {
            Ok(a) => a,
            Err(e) => {
                out.diagnostics.push(format!("{}: {e}", handle.id));
                continue;
            }
        };
        let proposed = match &analysis.proposal {
            Proposal::NoBreach => {
                out.no_breach += 1;
                continue;
            }
            Proposal::NoChange => {
                out.no_change += 1;
                continue;
            }
            Proposal::NoFeasible => {
                out.diagnostics.push(format!(
                    "{}: no flavor covers {:.4} cores / {:.4} GiB",
                    handle.id, analysis.needed.cpu, analysis.needed.mem
                ));
                continue;
            }
            Proposal::Resize(f) => f,
        };
        let mut evidence = vec![EvidenceRef { key: key.clone(), version: *version }];
        if let Some(m) = &metrics {
            evidence.push(EvidenceRef { key: m.key.clone(), version: m.version });
        }
        let rec = build_recommendation(handle, &analysis, current, proposed, &cluster, cfg.buffer, evidence, now);
        if is_suppressed(&rec.id, &feedback, now, cfg.suppression_window_ms) {
            out.suppressed += 1;
            continue;
        }
        match bb.put_json(&rec.key(), &rec, Some(0)) {
            Ok(_) => out.written.push(rec),
            Err(BlackboardError::VersionConflict { .. }) => out.existing.push(rec.id),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
