//! The `fleetopt` command line.
//!
//! Every subcommand opens the blackboard with a clock pinned to the run's
//! evaluation time, so the same inputs always produce the same log bytes.
//! Each run leaves a JSON report `runs/<seq>-<command>.json`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 bad input data,
//! 4 internal failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fleetopt_core::strategy::CONFLICT_NOTE;
use fleetopt_core::{
    compute_stats, dynamic_weights, rank_and_cap, resolve_conflicts, suppress_rejected, FeedbackAction,
    FeedbackRecord, FlavorCatalog, Millis, Objective, RankedRecommendation, Recommendation, Status, Weights,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blackboard::{Blackboard, BlackboardError, FixedClock, Snapshot};
use crate::config::{ConfigError, GeneratorConfig, RunConfig, CONFIG_ENV};
use crate::observer::{self, ObserverError, UtilizationObservation};
use crate::rightsizing::{self, ClusterMetrics, CLUSTER_METRICS_KEY, FEEDBACK_PREFIX};
use crate::security::{self, DocStore, SecurityError};
use crate::sim::{self, EpisodeError, Policy};
use crate::timefmt;
use crate::workflow::{self, FleetState, Mode, WorkflowError, RECOMMENDATION_PREFIX};

pub const STRATEGY_PREFIX: &str = "/strategy/";

#[derive(Debug, Parser)]
#[command(name = "fleetopt", version, about = "Rightsizing and security recommendations coordinated over a blackboard")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Blackboard directory.
    #[arg(long, global = true)]
    pub blackboard: Option<PathBuf>,
    /// Root of the working tree proposals are written into.
    #[arg(long, global = true)]
    pub repo_root: Option<PathBuf>,
    /// Directory for run reports.
    #[arg(long, global = true)]
    pub runs: Option<PathBuf>,
    /// Fleet state file that `apply` updates.
    #[arg(long, global = true)]
    pub fleet_state: Option<PathBuf>,
    /// Evaluation time, RFC 3339. Defaults to the system clock.
    #[arg(long, global = true)]
    pub now: Option<String>,
    /// Operator mode waits for feedback; auto mode applies what is surfaced.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seed of the synthetic fleet.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Recommendations surfaced per window.
    #[arg(long, global = true)]
    pub cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Operator,
    Auto,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read inventory, telemetry and an optional scan report onto the blackboard.
    Ingest(IngestArgs),
    /// Run the rightsizing and security agents.
    Recommend(RecommendArgs),
    /// Rank, de-conflict and cap this window's recommendations.
    Strategize,
    /// Write proposal directories for the surfaced recommendations.
    Emit,
    /// Record operator decisions.
    Feedback(FeedbackArgs),
    /// Apply approved (or, in auto mode, surfaced) recommendations to the fleet state.
    Apply,
    /// Generate a synthetic fleet and evaluate every policy on it.
    Simulate(SimulateArgs),
    /// Print cluster metrics and a per-window summary.
    Report,
    /// ingest, recommend, strategize, emit, feedback, apply and report in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct IngestArgs {
    /// Inventory (JSON).
    #[arg(long)]
    pub inventory: Option<PathBuf>,
    /// Telemetry CSV.
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
    /// Flavor catalog (JSON).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Security scan report (JSON).
    #[arg(long)]
    pub scan: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RecommendArgs {
    /// Flavor catalog (JSON).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Directory of documentation texts for the security agent.
    #[arg(long)]
    pub doc_store: Option<PathBuf>,
    /// Send remediation prompts to this HTTP endpoint instead of the stub.
    #[arg(long)]
    pub generator_endpoint: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FeedbackArgs {
    /// Feedback file (JSON array).
    #[arg(long)]
    pub file: Option<PathBuf>,
    /// Approve every surfaced recommendation of the current window.
    #[arg(long, conflicts_with = "file")]
    pub approve_all: bool,
    /// Actor recorded by --approve-all.
    #[arg(long, default_value = "operator")]
    pub actor: String,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n_vms: Option<usize>,
    /// Days of telemetry to generate, at least 15.
    #[arg(long)]
    pub days: Option<i64>,
    /// Share of VMs whose demand steps up or down at the start of the final week.
    #[arg(long)]
    pub step_share: Option<f64>,
    /// Accept fraction for the operator policy.
    #[arg(long)]
    pub accept_fraction: Option<f64>,
    /// Also write the metrics document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub ingest: IngestArgs,
    /// Directory of documentation texts for the security agent.
    #[arg(long)]
    pub doc_store: Option<PathBuf>,
    /// Send remediation prompts to this HTTP endpoint instead of the stub.
    #[arg(long)]
    pub generator_endpoint: Option<String>,
    /// Feedback file (JSON array).
    #[arg(long = "feedback")]
    pub feedback_file: Option<PathBuf>,
    /// Approve every surfaced recommendation of the current window.
    #[arg(long, conflicts_with = "feedback_file")]
    pub approve_all: bool,
    /// Actor recorded by --approve-all.
    #[arg(long, default_value = "operator")]
    pub actor: String,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} error: {}", self.category(), self.message())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BlackboardError> for CliError {
    fn from(e: BlackboardError) -> Self {
        match e {
            BlackboardError::Corrupt { .. } | BlackboardError::Decode { .. } => CliError::Data(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ObserverError> for CliError {
    fn from(e: ObserverError) -> Self {
        match e {
            ObserverError::Blackboard(b) => b.into(),
            ObserverError::Io(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SecurityError> for CliError {
    fn from(e: SecurityError) -> Self {
        match e {
            SecurityError::Parse(_) => CliError::Data(e.to_string()),
            SecurityError::Blackboard(b) => b.into(),
            SecurityError::Io(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<WorkflowError> for CliError {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::Blackboard(b) => b.into(),
            WorkflowError::Io(_) | WorkflowError::Json(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        // Both variants come from the simulation settings.
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}

fn read_input(what: &str, path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("{what} {} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_catalog(path: &Path) -> Result<FlavorCatalog, CliError> {
    let text = read_input("catalog", path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("catalog {}: {e}", path.display())))
}

fn objective_map(m: &BTreeMap<Objective, f64>) -> Value {
    Value::Object(m.iter().map(|(o, v)| (o.as_str().to_string(), json!(v))).collect())
}

/// Ranking of one window, stored under `/strategy/<window>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDoc {
    pub window_id: String,
    pub weights: Weights,
    pub surfaced: Vec<RankedEntry>,
    /// Ranked below the cap; still pending.
    pub retained: Vec<RankedEntry>,
    /// Lost conflict arbitration.
    pub deferred: Vec<RankedEntry>,
    pub suppressed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub id: String,
    pub key: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conflict_group: Option<String>,
}

impl RankedEntry {
    fn of(r: &RankedRecommendation) -> Self {
        RankedEntry { id: r.rec.id.clone(), key: r.rec.key(), score: r.score, conflict_group: r.conflict_group.clone() }
    }
}

/// Everything a subcommand needs after configuration is settled.
pub struct Context {
    pub cfg: RunConfig,
    pub now: Millis,
    pub window_id: String,
    bb: Option<Blackboard>,
}

impl Context {
    pub fn new(cfg: RunConfig, now: Millis) -> Self {
        Context { window_id: timefmt::iso_week_id(now), cfg, now, bb: None }
    }

    fn bb(&mut self) -> Result<&Blackboard, CliError> {
        if self.bb.is_none() {
            let clock = Arc::new(FixedClock::new(self.now));
            self.bb = Some(Blackboard::open(&self.cfg.paths.blackboard, clock)?);
        }
        Ok(self.bb.as_ref().expect("opened above"))
    }

    fn window_recs(&self, snap: &Snapshot) -> Vec<(Recommendation, u64)> {
        snap.list_prefix(RECOMMENDATION_PREFIX)
            .into_iter()
            .filter_map(|r| r.decode::<Recommendation>().ok().map(|rec| (rec, r.version)))
            .filter(|(rec, _)| rec.window_id == self.window_id)
            .collect()
    }
}

/// Settles configuration from the file and the flags.
pub fn build_config(global: &GlobalArgs) -> Result<(RunConfig, Millis), CliError> {
    let mut cfg = RunConfig::discover(global.config.as_deref())?;
    if let Some(p) = &global.blackboard {
        cfg.paths.blackboard = p.clone();
    }
    if let Some(p) = &global.repo_root {
        cfg.paths.repo_root = p.clone();
    }
    if let Some(p) = &global.runs {
        cfg.paths.runs = p.clone();
    }
    if let Some(p) = &global.fleet_state {
        cfg.paths.fleet_state = p.clone();
    }
    if let Some(n) = &global.now {
        cfg.now = Some(n.clone());
    }
    if let Some(m) = global.mode {
        cfg.mode = match m {
            ModeArg::Operator => Mode::Operator,
            ModeArg::Auto => Mode::Auto,
        };
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(k) = global.cap {
        cfg.objectives.cap = k;
    }
    cfg.validate()?;
    let now = match &cfg.now {
        Some(s) => timefmt::parse_rfc3339(s).map_err(|e| CliError::Config(format!("now {s:?}: {e}")))?,
        None => chrono::Utc::now().timestamp_millis(),
    };
    Ok((cfg, now))
}

fn sampling_period(obs_samples: &[observer::TelemetrySample]) -> Millis {
    let mut gaps: Vec<Millis> = obs_samples.windows(2).map(|w| w[1].at - w[0].at).collect();
    if gaps.is_empty() {
        return 0;
    }
    gaps.sort_unstable();
    gaps[gaps.len() / 2]
}

/// Fraction of allocated capacity left unused, averaged over cpu and memory.
fn idle_share(observations: &[UtilizationObservation], catalog: &FlavorCatalog) -> Option<f64> {
    let (mut used, mut alloc) = ([0.0; 2], [0.0; 2]);
    for o in observations {
        let Some(f) = catalog.get(&o.handle.flavor_name) else { continue };
        let n = o.samples.len().max(1) as f64;
        used[0] += o.samples.iter().map(|s| s.cpu_used).sum::<f64>() / n;
        used[1] += o.samples.iter().map(|s| s.mem_used).sum::<f64>() / n;
        alloc[0] += f.cpu;
        alloc[1] += f.mem;
    }
    (alloc[0] > 0.0 && alloc[1] > 0.0).then(|| 1.0 - 0.5 * (used[0] / alloc[0] + used[1] / alloc[1]))
}

/// Share of resources whose P95 utilization is above the upper threshold on
/// either dimension.
fn hot_share(observations: &[UtilizationObservation], catalog: &FlavorCatalog, upper: f64) -> Option<f64> {
    let mut hot = 0usize;
    let mut seen = 0usize;
    for o in observations {
        let Some(f) = catalog.get(&o.handle.flavor_name) else { continue };
        let (Ok(c), Ok(m)) = (compute_stats(&o.cpu_series(), f.cpu), compute_stats(&o.mem_series(), f.mem)) else {
            continue;
        };
        seen += 1;
        if c.p95_utilization() > upper || m.p95_utilization() > upper {
            hot += 1;
        }
    }
    (seen > 0).then(|| hot as f64 / seen as f64)
}

pub fn cmd_ingest(ctx: &mut Context, args: &IngestArgs) -> Result<Value, CliError> {
    let paths = ctx.cfg.paths.clone();
    let inventory_path = args.inventory.clone().unwrap_or(paths.inventory);
    let telemetry_path = args.telemetry.clone().unwrap_or(paths.telemetry);
    let catalog_path = args.catalog.clone().unwrap_or(paths.catalog);
    let scan_path = args.scan.clone().or(paths.scan);

    let catalog = load_catalog(&catalog_path)?;
    let mut handles = observer::ingest_inventory(&read_input("inventory", &inventory_path)?)?;
    let telemetry = read_input("telemetry", &telemetry_path)?;
    let scan = scan_path.as_deref().map(|p| read_input("scan report", p)).transpose()?;

    // The fleet state, once it exists, is authoritative for current flavors.
    let mut fleet = if paths.fleet_state.exists() {
        FleetState::load(&paths.fleet_state)?
    } else {
        FleetState::default()
    };
    let mut added = 0usize;
    for h in &mut handles {
        let key = workflow::resource_key(h.platform, &h.id);
        match fleet.resources.get(&key) {
            Some(r) => h.flavor_name = r.flavor.clone(),
            None => {
                let fresh = FleetState::from_inventory(std::slice::from_ref(h), &catalog);
                fleet.resources.extend(fresh.resources);
                added += 1;
            }
        }
    }

    let series = observer::ingest_telemetry(telemetry.as_bytes(), &handles)?;
    let window = ctx.cfg.rightsizing.window_ms;
    let mut observations = Vec::with_capacity(series.len());
    let mut diagnostics = Vec::new();
    for s in &series {
        match observer::build_observation(&s.handle, &s.samples, window, ctx.now, sampling_period(&s.samples)) {
            Ok(o) => observations.push(o),
            Err(e @ ObserverError::EmptyWindow { .. }) => diagnostics.push(e.to_string()),
            Err(e) => return Err(e.into()),
        }
    }
    let parsed_scan = scan.as_deref().map(security::parse_scan_report).transpose()?;

    let upper = ctx.cfg.rightsizing.thresholds.upper;
    let bb = ctx.bb()?;
    let posted = observer::post_observations(bb, &observations)?;

    let mut current = BTreeMap::new();
    if let Some(idle) = idle_share(&observations, &catalog) {
        current.insert(Objective::Cost, idle);
        current.insert(Objective::Sustainability, idle);
    }
    if let Some(hot) = hot_share(&observations, &catalog, upper) {
        current.insert(Objective::Reliability, hot);
        current.insert(Objective::Performance, hot);
    }
    let mut security_posted = 0;
    if let Some(scan) = &parsed_scan {
        security_posted = security::post_security_observations(bb, &scan.observations)?;
        diagnostics.extend(scan.diagnostics.iter().cloned());
        let total = scan.observations.len() + scan.passed;
        if total > 0 {
            current.insert(Objective::Security, scan.observations.len() as f64 / total as f64);
        }
    }
    let metrics = ClusterMetrics {
        capacity: rightsizing::fleet_capacity(&handles, &catalog),
        resources: handles.len(),
        current,
    };
    let value = serde_json::to_value(&metrics).map_err(|e| CliError::Internal(e.to_string()))?;
    bb.update(CLUSTER_METRICS_KEY, observer::POST_ATTEMPTS, |_| Ok(value.clone()))?;

    if let Some(dir) = paths.fleet_state.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fleet.save(&paths.fleet_state)?;
    Ok(json!({
        "resources": handles.len(),
        "resources_added_to_fleet_state": added,
        "utilization_observations": posted,
        "security_observations": security_posted,
        "scan_checks_passed": parsed_scan.as_ref().map_or(0, |s| s.passed),
        "cluster_metrics": {
            "capacity": { "cpu": metrics.capacity.cpu, "mem": metrics.capacity.mem },
            "current": objective_map(&metrics.current),
        },
        "diagnostics": diagnostics,
    }))
}

pub fn cmd_recommend(ctx: &mut Context, args: &RecommendArgs) -> Result<Value, CliError> {
    let catalog_path = args.catalog.clone().unwrap_or(ctx.cfg.paths.catalog.clone());
    let catalog = load_catalog(&catalog_path)?;
    let docs = match args.doc_store.clone().or(ctx.cfg.paths.doc_store.clone()) {
        Some(dir) if dir.is_dir() => DocStore::new(dir),
        Some(dir) => return Err(CliError::Config(format!("doc store {} is not a directory", dir.display()))),
        None => DocStore::empty(),
    };
    let generator = match &args.generator_endpoint {
        Some(endpoint) => GeneratorConfig::Http { endpoint: endpoint.clone() },
        None => ctx.cfg.generator.clone(),
    };
    let client = generator.build(ctx.cfg.security.timeout_ms);
    let (now, rs_cfg, sec_cfg) = (ctx.now, ctx.cfg.rightsizing.clone(), ctx.cfg.security.clone());
    let bb = ctx.bb()?;
    let rs = rightsizing::recommend(bb, &catalog, &rs_cfg, now)?;
    let sec = security::recommend_security(bb, &docs, client, &sec_cfg, now)?;
    let total = rs.written.len() + sec.written.len();
    let mut diagnostics = rs.diagnostics;
    diagnostics.extend(sec.diagnostics);
    Ok(json!({
        "recommendations_written": total,
        "rightsizing": {
            "written": rs.written.iter().map(|r| &r.id).collect::<Vec<_>>(),
            "already_present": rs.existing,
            "no_breach": rs.no_breach,
            "no_change": rs.no_change,
            "suppressed": rs.suppressed,
        },
        "security": {
            "written": sec.written.iter().map(|r| &r.id).collect::<Vec<_>>(),
            "fallbacks": sec.written.iter().filter(|r| r.remediation.as_ref().is_some_and(|m| m.used_fallback)).count(),
            "suppressed": sec.suppressed,
        },
        "summary": if total == 0 { "no new recommendations".to_string() } else { format!("{total} new recommendations") },
        "diagnostics": diagnostics,
    }))
}

fn dedup_notes(rec: &mut Recommendation) {
    let mut seen = std::collections::BTreeSet::new();
    rec.notes.retain(|n| seen.insert(n.clone()));
}

pub fn cmd_strategize(ctx: &mut Context) -> Result<Value, CliError> {
    let window_id = ctx.window_id.clone();
    let mut objectives = ctx.cfg.objectives.clone();
    let now = ctx.now;
    let suppression = ctx.cfg.rightsizing.suppression_window_ms;
    let bb = ctx.bb()?;
    let snap = bb.snapshot();
    let recs: Vec<(Recommendation, u64)> = snap
        .list_prefix(RECOMMENDATION_PREFIX)
        .into_iter()
        .filter_map(|r| r.decode::<Recommendation>().ok().map(|rec| (rec, r.version)))
        .filter(|(rec, _)| rec.window_id == window_id && matches!(rec.status, Status::Pending | Status::Surfaced))
        .collect();
    let feedback: Vec<FeedbackRecord> =
        snap.list_prefix(FEEDBACK_PREFIX).into_iter().filter_map(|r| r.decode().ok()).collect();
    if let Some(m) = snap.get(CLUSTER_METRICS_KEY).and_then(|r| r.decode::<ClusterMetrics>().ok()) {
        for (o, v) in m.current {
            objectives.current.entry(o).or_insert(v);
        }
    }
    let weights = dynamic_weights(&objectives).map_err(|e| CliError::Config(e.to_string()))?;

    let originals: BTreeMap<String, (Recommendation, u64)> =
        recs.iter().map(|(r, v)| (r.id.clone(), (r.clone(), *v))).collect();
    let candidates: Vec<Recommendation> = recs.into_iter().map(|(r, _)| r).collect();
    let before: Vec<String> = candidates.iter().map(|r| r.id.clone()).collect();
    let kept = suppress_rejected(candidates, &feedback, now, suppression);
    let suppressed: Vec<String> = before.into_iter().filter(|id| !kept.iter().any(|r| &r.id == id)).collect();

    let ranked: Vec<RankedRecommendation> = kept.into_iter().map(|r| RankedRecommendation::new(r, &weights)).collect();
    let resolution = resolve_conflicts(ranked, &objectives);
    let mut deferred = resolution.deferred;
    let capped = rank_and_cap(resolution.survivors, objectives.cap);
    deferred.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.rec.id.cmp(&b.rec.id)));

    let mut updated = 0usize;
    let mut diagnostics = Vec::new();
    for r in capped.surfaced.iter().chain(&deferred) {
        let mut rec = r.rec.clone();
        dedup_notes(&mut rec);
        let (orig, version) = &originals[&rec.id];
        if rec.status == orig.status && rec.notes == orig.notes {
            continue;
        }
        match workflow::store_recommendation(bb, &mut rec, *version) {
            Ok(()) => updated += 1,
            Err(BlackboardError::VersionConflict { .. }) => {
                diagnostics.push(format!("{}: changed concurrently, left as is", rec.id));
            }
            Err(e) => return Err(e.into()),
        }
    }

    let doc = StrategyDoc {
        window_id: window_id.clone(),
        weights,
        surfaced: capped.surfaced.iter().map(RankedEntry::of).collect(),
        retained: capped.retained.iter().map(RankedEntry::of).collect(),
        deferred: deferred.iter().map(RankedEntry::of).collect(),
        suppressed,
    };
    let key = format!("{STRATEGY_PREFIX}{window_id}");
    let value = serde_json::to_value(&doc).map_err(|e| CliError::Internal(e.to_string()))?;
    if bb.get(&key).map(|r| r.value) != Some(value.clone()) {
        bb.update(&key, observer::POST_ATTEMPTS, |_| Ok(value.clone()))?;
    }
    Ok(json!({
        "window_id": window_id,
        "weights": weights,
        "surfaced": doc.surfaced.iter().map(|e| &e.id).collect::<Vec<_>>(),
        "retained": doc.retained.len(),
        "deferred": doc.deferred.iter().map(|e| json!({"id": e.id, "conflict_group": e.conflict_group, "note": CONFLICT_NOTE})).collect::<Vec<_>>(),
        "suppressed": doc.suppressed,
        "recommendations_updated": updated,
        "diagnostics": diagnostics,
    }))
}

fn strategy_doc(bb: &Blackboard, window_id: &str) -> Result<Option<StrategyDoc>, CliError> {
    Ok(bb.get_as::<StrategyDoc>(&format!("{STRATEGY_PREFIX}{window_id}"))?.map(|(d, _)| d))
}

pub fn cmd_emit(ctx: &mut Context) -> Result<Value, CliError> {
    let (window_id, now, repo_root) = (ctx.window_id.clone(), ctx.now, ctx.cfg.paths.repo_root.clone());
    let bb = ctx.bb()?;
    let Some(doc) = strategy_doc(bb, &window_id)? else {
        return Ok(json!({ "window_id": window_id, "emitted": [], "already_emitted": [], "summary": "no ranking for this window; run strategize first" }));
    };
    let mut emitted = Vec::new();
    let mut existing = Vec::new();
    let mut skipped = Vec::new();
    for entry in &doc.surfaced {
        let Some((rec, _)) = bb.get_as::<Recommendation>(&entry.key)? else {
            skipped.push(json!({ "id": entry.id, "reason": "missing from blackboard" }));
            continue;
        };
        if rec.status != Status::Surfaced {
            skipped.push(json!({ "id": entry.id, "reason": format!("status {}", rec.status.as_str()) }));
            continue;
        }
        match workflow::emit_proposal(&rec, entry.score, &repo_root, &window_id, now)? {
            workflow::EmitOutcome::Emitted(a) => emitted.push(a.directory.display().to_string()),
            workflow::EmitOutcome::AlreadyEmitted(a) => existing.push(a.directory.display().to_string()),
        }
    }
    Ok(json!({ "window_id": window_id, "emitted": emitted, "already_emitted": existing, "skipped": skipped }))
}

pub fn cmd_feedback(ctx: &mut Context, args: &FeedbackArgs) -> Result<Value, CliError> {
    if ctx.cfg.mode == Mode::Auto {
        return Err(CliError::Config("feedback is not accepted in auto mode".into()));
    }
    let (window_id, now) = (ctx.window_id.clone(), ctx.now);
    let file = args.file.clone().or(ctx.cfg.paths.feedback.clone());
    let text = if args.approve_all {
        let bb = ctx.bb()?;
        let snap = bb.snapshot();
        let entries: Vec<Value> = snap
            .list_prefix(RECOMMENDATION_PREFIX)
            .into_iter()
            .filter_map(|r| r.decode::<Recommendation>().ok())
            .filter(|r| r.window_id == window_id && r.status == Status::Surfaced)
            .map(|r| json!({ "rec_id": r.id, "action": "approved", "actor": args.actor, "at": timefmt::format_rfc3339(now) }))
            .collect();
        Value::Array(entries).to_string()
    } else {
        match file {
            Some(p) => read_input("feedback file", &p)?,
            None => return Err(CliError::Config("no feedback file given (use --file or --approve-all)".into())),
        }
    };
    let bb = ctx.bb()?;
    let out = workflow::ingest_feedback(&text, bb)?;
    Ok(json!({
        "records": out.records.iter().map(|r| json!({"rec_id": r.rec_id, "action": r.action, "actor": r.actor})).collect::<Vec<_>>(),
        "diagnostics": out.diagnostics,
    }))
}

pub fn cmd_apply(ctx: &mut Context) -> Result<Value, CliError> {
    let (mode, now) = (ctx.cfg.mode, ctx.now);
    let paths = ctx.cfg.paths.clone();
    if !paths.fleet_state.exists() {
        return Err(CliError::Config(format!(
            "fleet state {} does not exist; run ingest first",
            paths.fleet_state.display()
        )));
    }
    let mut fleet = FleetState::load(&paths.fleet_state)?;
    if let Some(dir) = paths.audit_log.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let snap = ctx.bb()?.snapshot();
    let recs = ctx.window_recs(&snap);
    let bb = ctx.bb()?;

    let mut applied = Vec::new();
    let mut stale = Vec::new();
    for (mut rec, version) in recs {
        // Remediation guides carry no patch; people act on them directly.
        if rec.patch.is_empty() {
            continue;
        }
        let eligible = matches!(
            (mode, rec.status),
            (_, Status::Approved | Status::Modified) | (Mode::Auto, Status::Surfaced)
        );
        if !eligible {
            continue;
        }
        let feedback = bb.get_as::<FeedbackRecord>(&format!("{FEEDBACK_PREFIX}{}", rec.id))?.map(|(f, _)| f);
        let actor = if rec.status == Status::Surfaced {
            let marker = FeedbackRecord {
                rec_id: rec.id.clone(),
                action: FeedbackAction::Approved,
                actor: "auto".into(),
                at: now,
                modified_patch: None,
            };
            let value = serde_json::to_value(&marker).map_err(|e| CliError::Internal(e.to_string()))?;
            bb.update(&format!("{FEEDBACK_PREFIX}{}", rec.id), observer::POST_ATTEMPTS, |_| Ok(value.clone()))?;
            "auto".to_string()
        } else {
            feedback.as_ref().map_or_else(|| "unknown".to_string(), |f| f.actor.clone())
        };
        let modified = feedback.as_ref().and_then(|f| f.modified_patch.clone());
        match workflow::apply_patch(&mut rec, &mut fleet, mode, modified.as_deref(), &paths.audit_log, &actor, now) {
            Ok(()) => {
                applied.push(json!({
                    "rec_id": rec.id,
                    "resource": workflow::resource_key(rec.handle.platform, &rec.handle.id),
                    "from": rec.current_flavor,
                    "to": fleet.resources.get(&workflow::resource_key(rec.handle.platform, &rec.handle.id)).map(|r| r.flavor.clone()),
                    "actor": actor,
                }));
            }
            Err(e @ WorkflowError::StaleTarget { .. }) => {
                let note = format!("stale target: {e}");
                if !rec.notes.contains(&note) {
                    rec.notes.push(note);
                }
                stale.push(json!({ "rec_id": rec.id, "error": e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        }
        workflow::store_recommendation(bb, &mut rec, version)?;
    }
    fleet.save(&paths.fleet_state)?;
    Ok(json!({ "applied": applied, "stale": stale }))
}

fn simulation_result(cfg: &RunConfig, args: &SimulateArgs) -> Result<(Value, Vec<(f64, f64)>), CliError> {
    let mut spec = cfg.simulation.spec.clone();
    spec.seed = cfg.seed;
    if let Some(n) = args.n_vms {
        spec.n_vms = n;
    }
    if let Some(d) = args.days {
        spec.duration_days = d;
    }
    if let Some(s) = args.step_share {
        spec.step_share = s;
    }
    let accept = args.accept_fraction.unwrap_or(cfg.simulation.accept_fraction);
    if !(0.0..=1.0).contains(&accept) {
        return Err(CliError::Config("accept fraction must lie in [0, 1]".into()));
    }
    let episode = &cfg.simulation.episode;
    let fleet = sim::generate_fleet(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let data = sim::prepare_episode(&fleet, episode)?;
    let policies = [Policy::None, Policy::Reactive, Policy::Auto, Policy::Operator { accept_fraction: accept }];
    let metrics: Vec<_> = policies.iter().map(|p| sim::run_prepared(&fleet, &data, *p, episode)).collect();
    let curve = sim::ablation_curve(&fleet, &data, &data.plan.ranked);
    let value = json!({
        "spec": spec,
        "fleet_check": fleet.check,
        "policies": metrics,
        "ablation": {
            "points": curve.len(),
            "benefit_at_top_15pct": sim::benefit_at(&curve, 0.15),
            "monotone": sim::is_monotone(&curve),
            "concave_trending": sim::is_concave_trending(&curve, 0.05),
        },
        "diagnostics": data.plan.diagnostics,
    });
    Ok((value, curve))
}

pub fn cmd_simulate(ctx: &mut Context, args: &SimulateArgs, csv_path: &Path) -> Result<Value, CliError> {
    let (mut value, curve) = simulation_result(&ctx.cfg, args)?;
    let mut csv = String::from("fraction_applied,fraction_of_benefit\n");
    for (x, y) in &curve {
        csv.push_str(&format!("{x},{y}\n"));
    }
    if let Some(dir) = csv_path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(csv_path, csv).map_err(|e| io_err(csv_path, e))?;
    value["ablation"]["csv"] = json!(csv_path.display().to_string());
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(out, text).map_err(|e| io_err(out, e))?;
    }
    print_simulation(&value);
    Ok(value)
}

fn print_simulation(value: &Value) {
    let num = |v: &Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    println!(
        "{:<14} {:>9} {:>9} {:>9} {:>9} {:>12} {:>6} {:>7}",
        "policy", "cpu p25", "after", "mem p25", "after", "wasted vCPU", "recs", "errors"
    );
    for p in value["policies"].as_array().into_iter().flatten() {
        println!(
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>12.1} {:>6} {:>7.4}",
            p["policy"].as_str().unwrap_or("?"),
            num(p, "util_cpu_p25_before"),
            num(p, "util_cpu_p25_after"),
            num(p, "util_mem_p25_before"),
            num(p, "util_mem_p25_after"),
            num(p, "wasted_vcores"),
            p["recommendations_applied"].as_u64().unwrap_or(0),
            num(p, "error_rate"),
        );
    }
    let a = &value["ablation"];
    println!(
        "ablation: {:.3} of the benefit from the top 15%, monotone {}, concave {}",
        num(a, "benefit_at_top_15pct"),
        a["monotone"],
        a["concave_trending"]
    );
}

pub fn cmd_report(ctx: &mut Context) -> Result<Value, CliError> {
    let paths = ctx.cfg.paths.clone();
    let bb = ctx.bb()?;
    let snap = bb.snapshot();
    let metrics = snap.get(CLUSTER_METRICS_KEY).and_then(|r| r.decode::<ClusterMetrics>().ok());
    let mut windows: BTreeMap<String, BTreeMap<String, BTreeMap<&'static str, usize>>> = BTreeMap::new();
    for r in snap.list_prefix(RECOMMENDATION_PREFIX) {
        let Ok(rec) = r.decode::<Recommendation>() else { continue };
        *windows
            .entry(rec.window_id.clone())
            .or_default()
            .entry(rec.agent.clone())
            .or_default()
            .entry(rec.status.as_str())
            .or_default() += 1;
    }
    let audit = workflow::read_audit(&paths.audit_log)?;
    let fleet = if paths.fleet_state.exists() { Some(FleetState::load(&paths.fleet_state)?) } else { None };

    let mut text = String::new();
    if let Some(m) = &metrics {
        text.push_str(&format!(
            "cluster: {} resources, {:.2} vCPU, {:.2} GiB\n",
            m.resources, m.capacity.cpu, m.capacity.mem
        ));
        for (o, v) in &m.current {
            text.push_str(&format!("  {:<15} {v:.4}\n", o.as_str()));
        }
    } else {
        text.push_str("cluster: no metrics on the blackboard\n");
    }
    for (window, agents) in &windows {
        text.push_str(&format!("window {window}\n"));
        for (agent, statuses) in agents {
            let parts: Vec<String> = statuses.iter().map(|(s, n)| format!("{s}={n}")).collect();
            text.push_str(&format!("  {agent:<12} {}\n", parts.join(" ")));
        }
    }
    text.push_str(&format!("applied changes: {}\n", audit.len()));
    for a in &audit {
        let changes: Vec<String> = a
            .changes
            .iter()
            .map(|c| format!("{} {} -> {}", c.path, field_text(&c.old), field_text(&c.new)))
            .collect();
        text.push_str(&format!("  {} {} by {} ({}): {}\n", a.at, a.resource, a.actor, a.rec_id, changes.join(", ")));
    }
    print!("{text}");

    Ok(json!({
        "cluster_metrics": metrics.as_ref().map(|m| json!({
            "resources": m.resources,
            "capacity": { "cpu": m.capacity.cpu, "mem": m.capacity.mem },
            "current": objective_map(&m.current),
        })),
        "windows": windows,
        "applied_changes": audit.len(),
        "audit": audit,
        "fleet": fleet.map(|f| f.resources.into_iter().map(|(k, r)| (k, r.flavor)).collect::<BTreeMap<_, _>>()),
    }))
}

fn field_text(v: &fleetopt_core::FieldValue) -> String {
    match v {
        fleetopt_core::FieldValue::Number(n) => n.to_string(),
        fleetopt_core::FieldValue::Text(t) => t.clone(),
    }
}

pub fn cmd_pipeline(ctx: &mut Context, args: &PipelineArgs) -> Result<Value, CliError> {
    let mut steps = serde_json::Map::new();
    steps.insert("ingest".into(), cmd_ingest(ctx, &args.ingest)?);
    let recommend = RecommendArgs {
        catalog: args.ingest.catalog.clone(),
        doc_store: args.doc_store.clone(),
        generator_endpoint: args.generator_endpoint.clone(),
    };
    steps.insert("recommend".into(), cmd_recommend(ctx, &recommend)?);
    steps.insert("strategize".into(), cmd_strategize(ctx)?);
    steps.insert("emit".into(), cmd_emit(ctx)?);
    let feedback_given = args.approve_all || args.feedback_file.is_some() || ctx.cfg.paths.feedback.is_some();
    if ctx.cfg.mode == Mode::Operator && feedback_given {
        let fb = FeedbackArgs { file: args.feedback_file.clone(), approve_all: args.approve_all, actor: args.actor.clone() };
        steps.insert("feedback".into(), cmd_feedback(ctx, &fb)?);
    }
    steps.insert("apply".into(), cmd_apply(ctx)?);
    steps.insert("report".into(), cmd_report(ctx)?);
    Ok(Value::Object(steps))
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Recommend(_) => "recommend",
            Command::Strategize => "strategize",
            Command::Emit => "emit",
            Command::Feedback(_) => "feedback",
            Command::Apply => "apply",
            Command::Simulate(_) => "simulate",
            Command::Report => "report",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

fn next_seq(runs: &Path) -> u32 {
    let Ok(entries) = fs::read_dir(runs) else { return 1 };
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.get(..4)).and_then(|p| p.parse::<u32>().ok()))
        .max()
        .map_or(1, |m| m + 1)
}

/// Structured record of one invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seq: u32,
    pub command: String,
    pub now: Option<String>,
    pub window_id: Option<String>,
    pub mode: Option<Mode>,
    pub status: String,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub result: Value,
}

fn execute(ctx: &mut Context, command: &Command, seq: u32) -> Result<Value, CliError> {
    match command {
        Command::Ingest(a) => cmd_ingest(ctx, a),
        Command::Recommend(a) => cmd_recommend(ctx, a),
        Command::Strategize => cmd_strategize(ctx),
        Command::Emit => cmd_emit(ctx),
        Command::Feedback(a) => cmd_feedback(ctx, a),
        Command::Apply => cmd_apply(ctx),
        Command::Simulate(a) => {
            let csv = ctx.cfg.paths.runs.join(format!("{seq:04}-simulate-ablation.csv"));
            cmd_simulate(ctx, a, &csv)
        }
        Command::Report => cmd_report(ctx),
        Command::Pipeline(a) => cmd_pipeline(ctx, a),
    }
}

/// Runs one parsed invocation and writes its report. Returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let name = cli.command.name();
    let settled = build_config(&cli.global);
    let runs_dir = match &settled {
        Ok((cfg, _)) => cfg.paths.runs.clone(),
        Err(_) => cli.global.runs.clone().unwrap_or_else(|| PathBuf::from("runs")),
    };
    let seq = next_seq(&runs_dir);
    let (outcome, now, window, mode) = match settled {
        Ok((cfg, now)) => {
            let mode = cfg.mode;
            let mut ctx = Context::new(cfg, now);
            let window = ctx.window_id.clone();
            (execute(&mut ctx, &cli.command, seq), Some(timefmt::format_rfc3339(now)), Some(window), Some(mode))
        }
        Err(e) => (Err(e), None, None, None),
    };
    let (code, error, result) = match outcome {
        Ok(v) => (0, None, v),
        Err(e) => {
            eprintln!("fleetopt {name}: {e}");
            (e.exit_code(), Some(e.to_string()), Value::Null)
        }
    };
    let report = RunReport {
        seq,
        command: name.to_string(),
        now,
        window_id: window,
        mode,
        status: if code == 0 { "ok".into() } else { "error".into() },
        exit_code: code,
        error,
        result,
    };
    if !matches!(name, "report" | "pipeline") && code == 0 {
        println!("{name}: {}", one_line(&report.result));
    }
    let path = runs_dir.join(format!("{seq:04}-{name}.json"));
    let written = fs::create_dir_all(&runs_dir)
        .and_then(|_| fs::write(&path, serde_json::to_vec_pretty(&report).unwrap_or_default()));
    if let Err(e) = written {
        eprintln!("fleetopt {name}: cannot write run report {}: {e}", path.display());
        if code == 0 {
            return 4;
        }
    }
    code
}

/// Short human summary of a result document.
fn one_line(v: &Value) -> String {
    let Some(obj) = v.as_object() else { return v.to_string() };
    obj.iter()
        .filter_map(|(k, v)| match v {
            Value::Number(n) => Some(format!("{k}={n}")),
            Value::String(s) if s.len() < 80 => Some(format!("{k}={s}")),
            Value::Array(a) => Some(format!("{k}={}", a.len())),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses `args` (including the program name) and runs them.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
