//! Policies, episode metrics, the ablation curve and the next-week error
//! rate.

use std::collections::{BTreeMap, HashMap};

use fleetopt_core::stats::{p95, percentile};
use fleetopt_core::sizing::{BreachKind, ClusterCapacity};
use fleetopt_core::time::{DAY_MS, WEEK_MS};
use fleetopt_core::{
    dynamic_weights, rank_and_cap, resolve_conflicts, EvidenceRef, Flavor, Millis, ObjectiveConfig,
    RankedRecommendation, Recommendation, Requirement, StrategyError,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::fleet::{par_map, Fleet, SimError, Trace};
use crate::observer::utilization_key;
use crate::rightsizing::{analyze, build_recommendation, Analysis, Proposal, RightsizingConfig};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Policy {
    /// Static allocation.
    None,
    /// Threshold autoscaler without forecasting.
    Reactive,
    /// Every recommendation applied automatically.
    Auto,
    /// The top `accept_fraction` of the strategizer ranking applied.
    Operator { accept_fraction: f64 },
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::None => "none".into(),
            Policy::Reactive => "reactive".into(),
            Policy::Auto => "auto".into(),
            Policy::Operator { accept_fraction } => format!("operator({accept_fraction})"),
        }
    }
}

/// The reactive baseline: every day, size to the trailing P95 times
/// `margin` whenever the current allocation is more than `band` away from
/// that target on either dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReactiveConfig {
    pub margin: f64,
    pub band: f64,
    pub lookback_ms: Millis,
    /// Round targets up to the nearest catalog flavor. VMs can only run on
    /// catalog flavors, so this is on by default.
    pub snap_to_catalog: bool,
}

impl Default for ReactiveConfig {
    fn default() -> Self {
        ReactiveConfig { margin: 1.15, band: 0.10, lookback_ms: DAY_MS, snap_to_catalog: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub rightsizing: RightsizingConfig,
    pub objectives: ObjectiveConfig,
    pub reactive: ReactiveConfig,
    /// Relative band around the recommended value for the error rate.
    pub error_band: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            rightsizing: RightsizingConfig::default(),
            objectives: ObjectiveConfig::default(),
            reactive: ReactiveConfig::default(),
            error_band: 0.15,
        }
    }
}

/// Counts over the analyzed VMs. `suspected_idle` overlaps `downscale`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendationMix {
    pub vms: usize,
    pub downscale: usize,
    pub upscale: usize,
    pub correctly_sized: usize,
    pub suspected_idle: usize,
    pub no_feasible: usize,
    pub failed: usize,
}

impl RecommendationMix {
    pub fn share(&self, count: usize) -> f64 {
        if self.vms == 0 {
            0.0
        } else {
            count as f64 / self.vms as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub evaluated: usize,
    pub above_band: usize,
    pub below_band: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub policy: String,
    pub vms: usize,
    pub util_cpu_p25_before: f64,
    pub util_cpu_p25_after: f64,
    pub util_mem_p25_before: f64,
    pub util_mem_p25_after: f64,
    pub theoretical_cpu_p25: f64,
    pub theoretical_mem_p25: f64,
    pub wasted_vcores: f64,
    pub wasted_mem_gib: f64,
    pub recommendations_total: usize,
    pub recommendations_applied: usize,
    pub error_rate: f64,
    pub errors: ErrorReport,
    pub mix: Option<RecommendationMix>,
}

impl EpisodeMetrics {
    pub fn cpu_gain(&self) -> f64 {
        self.util_cpu_p25_after / self.util_cpu_p25_before
    }

    pub fn mem_gain(&self) -> f64 {
        self.util_mem_p25_after / self.util_mem_p25_before
    }
}

/// One VM's view of the episode: the day before the decision point and the
/// week after it.
#[derive(Debug, Clone)]
pub struct VmWeek {
    pub lead: Trace,
    pub eval: Trace,
    pub p95_cpu: f64,
    pub p95_mem: f64,
}

/// Agent output for the fleet, ranked by the strategizer without a cap.
#[derive(Debug, Clone, Default)]
pub struct Plan {
    pub ranked: Vec<RankedRecommendation>,
    pub deferred: Vec<RankedRecommendation>,
    pub mix: RecommendationMix,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct EpisodeData {
    pub decision_at: Millis,
    pub weeks: Vec<VmWeek>,
    pub plan: Plan,
}

fn classify(mix: &mut RecommendationMix, analysis: &Analysis, current: &Flavor) {
    if analysis.finding.kind == BreachKind::SuspectedIdle {
        mix.suspected_idle += 1;
    }
    match &analysis.proposal {
        Proposal::NoBreach | Proposal::NoChange => mix.correctly_sized += 1,
        Proposal::NoFeasible => mix.no_feasible += 1,
        Proposal::Resize(f) if f.cost_rank < current.cost_rank => mix.downscale += 1,
        Proposal::Resize(_) => mix.upscale += 1,
    }
}

/// Generates the history window and the following week for every VM, runs
/// the rightsizing analysis at the start of the final week and ranks the
/// resulting recommendations.
pub fn prepare_episode(fleet: &Fleet, cfg: &EpisodeConfig) -> Result<EpisodeData, EpisodeError> {
    let period = fleet.spec.sampling_ms;
    let t0_index = fleet.final_week_start();
    let window = (cfg.rightsizing.window_ms / period) as usize;
    let lead_len = (cfg.reactive.lookback_ms / period) as usize;
    if window.max(lead_len) > t0_index {
        return Err(SimError::NotEnoughHistory {
            needed: (window.max(lead_len) as Millis * period + WEEK_MS + DAY_MS - 1) / DAY_MS,
            available: fleet.spec.duration_days,
        }
        .into());
    }
    let decision_at = fleet.sample_time(t0_index);
    let origin = fleet.sample_time(t0_index - 1);

    let per_vm: Vec<(VmWeek, Result<Analysis, String>)> = par_map(fleet.vms.len(), |i| {
        let tr = fleet.trace(i);
        let vm = &fleet.vms[i];
        let hist = t0_index - window..t0_index;
        let analysis = analyze(
            &tr.cpu[hist.clone()],
            &tr.mem[hist],
            &vm.flavor,
            &fleet.catalog,
            &cfg.rightsizing,
            origin,
            period,
        )
        .map_err(|e| format!("{}: {e}", vm.handle.id));
        let lead = Trace { cpu: tr.cpu[t0_index - lead_len..t0_index].to_vec(), mem: tr.mem[t0_index - lead_len..t0_index].to_vec() };
        let eval = Trace { cpu: tr.cpu[t0_index..].to_vec(), mem: tr.mem[t0_index..].to_vec() };
        let week = VmWeek {
            p95_cpu: p95(&eval.cpu).unwrap_or(0.0),
            p95_mem: p95(&eval.mem).unwrap_or(0.0),
            lead,
            eval,
        };
        (week, analysis)
    });

    let cluster = ClusterCapacity {
        cpu: fleet.vms.iter().map(|v| v.flavor.cpu).sum(),
        mem: fleet.vms.iter().map(|v| v.flavor.mem).sum(),
    };
    let weights = dynamic_weights(&cfg.objectives)?;
    let mut mix = RecommendationMix { vms: fleet.vms.len(), ..Default::default() };
    let mut diagnostics = Vec::new();
    let mut ranked = Vec::new();
    let mut weeks = Vec::with_capacity(per_vm.len());
    for (vm, (week, analysis)) in fleet.vms.iter().zip(per_vm) {
        weeks.push(week);
        let a = match analysis {
            Ok(a) => a,
            Err(e) => {
                mix.failed += 1;
                diagnostics.push(e);
                continue;
            }
        };
        classify(&mut mix, &a, &vm.flavor);
        if let Proposal::Resize(proposed) = &a.proposal {
            let evidence = vec![EvidenceRef { key: utilization_key(&vm.handle), version: 1 }];
            let rec = build_recommendation(
                &vm.handle,
                &a,
                &vm.flavor,
                proposed,
                &cluster,
                cfg.rightsizing.buffer,
                evidence,
                decision_at,
            );
            ranked.push(RankedRecommendation::new(rec, &weights));
        }
    }
    let resolution = resolve_conflicts(ranked, &cfg.objectives);
    let capped = rank_and_cap(resolution.survivors, usize::MAX);
    Ok(EpisodeData {
        decision_at,
        weeks,
        plan: Plan { ranked: capped.surfaced, deferred: resolution.deferred, mix, diagnostics },
    })
}

fn mean_util(demand: &[f64], alloc: impl Fn(usize) -> f64) -> f64 {
    if demand.is_empty() {
        return 0.0;
    }
    demand
        .iter()
        .enumerate()
        .map(|(t, &d)| {
            let a = alloc(t);
            if a > 0.0 {
                d.min(a) / a
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / demand.len() as f64
}

/// Per-day flavors of the reactive baseline over the evaluation week.
fn reactive_days(fleet: &Fleet, original: &Flavor, week: &VmWeek, cfg: &ReactiveConfig) -> Vec<Flavor> {
    let per_day = fleet.samples_per_day();
    let days = week.eval.cpu.len() / per_day;
    let mut current = original.clone();
    let mut out = Vec::with_capacity(days);
    for day in 0..days {
        let (cpu, mem) = if day == 0 {
            (&week.lead.cpu[..], &week.lead.mem[..])
        } else {
            let r = (day - 1) * per_day..day * per_day;
            (&week.eval.cpu[r.clone()], &week.eval.mem[r])
        };
        let target = Requirement::new(
            p95(cpu).unwrap_or(0.0) * cfg.margin,
            p95(mem).unwrap_or(0.0) * cfg.margin,
        );
        let off = |alloc: f64, t: f64| t <= 0.0 || (alloc / t - 1.0).abs() > cfg.band;
        if off(current.cpu, target.cpu) || off(current.mem, target.mem) {
            if cfg.snap_to_catalog {
                if let Ok(f) = fleet.catalog.nearest_feasible(&target) {
                    current = f.clone();
                }
            } else {
                current = Flavor::new("reactive", target.cpu, target.mem, 0.0);
            }
        }
        out.push(current.clone());
    }
    out
}

/// Allocation applied by each recommendation, keyed by VM id.
fn applied_flavors(fleet: &Fleet, recs: &[RankedRecommendation]) -> HashMap<String, Flavor> {
    recs.iter()
        .filter_map(|r| {
            let name = r.rec.proposed_flavor.as_deref()?;
            Some((r.rec.handle.id.clone(), fleet.catalog.get(name)?.clone()))
        })
        .collect()
}

fn oracle_flavor(fleet: &Fleet, original: &Flavor, week: &VmWeek, buffer: f64) -> Flavor {
    let req = Requirement::new(week.p95_cpu * (1.0 + buffer), week.p95_mem * (1.0 + buffer));
    fleet.catalog.nearest_feasible(&req).map_or_else(|_| original.clone(), Clone::clone)
}

/// Number of ranked recommendations the operator policy accepts.
pub fn accepted_count(total: usize, accept_fraction: f64) -> usize {
    ((accept_fraction.clamp(0.0, 1.0) * total as f64).round() as usize).min(total)
}

/// Evaluates `policy` on prepared data. Utilization is the mean of
/// `min(demand, allocation) / allocation` over the evaluation week.
pub fn run_prepared(fleet: &Fleet, data: &EpisodeData, policy: Policy, cfg: &EpisodeConfig) -> EpisodeMetrics {
    let n = fleet.vms.len();
    let applied: &[RankedRecommendation] = match policy {
        Policy::None | Policy::Reactive => &[],
        Policy::Auto => &data.plan.ranked,
        Policy::Operator { accept_fraction } => {
            &data.plan.ranked[..accepted_count(data.plan.ranked.len(), accept_fraction)]
        }
    };
    let resized = applied_flavors(fleet, applied);
    let per_day = fleet.samples_per_day();

    let mut before = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut after = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut oracle = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut wasted_vcores = 0.0;
    let mut wasted_mem_gib = 0.0;
    for (vm, week) in fleet.vms.iter().zip(&data.weeks) {
        let orig = &vm.flavor;
        before.0.push(mean_util(&week.eval.cpu, |_| orig.cpu));
        before.1.push(mean_util(&week.eval.mem, |_| orig.mem));

        let days: Vec<Flavor> = match policy {
            Policy::Reactive => reactive_days(fleet, orig, week, &cfg.reactive),
            _ => vec![resized.get(&vm.handle.id).unwrap_or(orig).clone()],
        };
        let day_of = |t: usize| (t / per_day).min(days.len() - 1);
        after.0.push(mean_util(&week.eval.cpu, |t| days[day_of(t)].cpu));
        after.1.push(mean_util(&week.eval.mem, |t| days[day_of(t)].mem));
        let last = &days[days.len() - 1];
        wasted_vcores += (last.cpu - week.p95_cpu).max(0.0);
        wasted_mem_gib += (last.mem - week.p95_mem).max(0.0);

        let o = oracle_flavor(fleet, orig, week, cfg.rightsizing.buffer);
        oracle.0.push(mean_util(&week.eval.cpu, |_| o.cpu));
        oracle.1.push(mean_util(&week.eval.mem, |_| o.mem));
    }
    let p25 = |v: &[f64]| percentile(v, 25).unwrap_or(0.0);

    let recommends = matches!(policy, Policy::Auto | Policy::Operator { .. });
    let errors = if recommends {
        let recs: Vec<Recommendation> = data.plan.ranked.iter().map(|r| r.rec.clone()).collect();
        let future: BTreeMap<&str, &Trace> =
            fleet.vms.iter().zip(&data.weeks).map(|(v, w)| (v.handle.id.as_str(), &w.eval)).collect();
        evaluate_error_rate(&recs, fleet, &future, cfg.error_band)
    } else {
        ErrorReport::default()
    };
    EpisodeMetrics {
        policy: policy.name(),
        vms: n,
        util_cpu_p25_before: p25(&before.0),
        util_cpu_p25_after: p25(&after.0),
        util_mem_p25_before: p25(&before.1),
        util_mem_p25_after: p25(&after.1),
        theoretical_cpu_p25: p25(&oracle.0),
        theoretical_mem_p25: p25(&oracle.1),
        wasted_vcores,
        wasted_mem_gib,
        recommendations_total: if recommends { data.plan.ranked.len() } else { 0 },
        recommendations_applied: applied.len(),
        error_rate: errors.rate,
        errors,
        mix: recommends.then(|| data.plan.mix.clone()),
    }
}

pub fn run_episode(fleet: &Fleet, policy: Policy, cfg: &EpisodeConfig) -> Result<EpisodeMetrics, EpisodeError> {
    let data = prepare_episode(fleet, cfg)?;
    Ok(run_prepared(fleet, &data, policy, cfg))
}

/// Benefit of applying each 1% prefix of the ranking: the reduction in
/// wasted capacity (allocation above the next-week P95) relative to
/// applying every recommendation, averaged over cpu and memory and clamped
/// at zero. Points are `(fraction_applied, fraction_of_benefit)`.
pub fn ablation_curve(fleet: &Fleet, data: &EpisodeData, ranked: &[RankedRecommendation]) -> Vec<(f64, f64)> {
    let index: HashMap<&str, usize> =
        fleet.vms.iter().enumerate().map(|(i, v)| (v.handle.id.as_str(), i)).collect();
    let waste = |i: usize, f: &Flavor| {
        let w = &data.weeks[i];
        ((f.cpu - w.p95_cpu).max(0.0), (f.mem - w.p95_mem).max(0.0))
    };
    // Change in (cpu, mem) waste from applying each recommendation in turn.
    let deltas: Vec<(f64, f64)> = ranked
        .iter()
        .map(|r| {
            let (Some(&i), Some(p)) = (
                index.get(r.rec.handle.id.as_str()),
                r.rec.proposed_flavor.as_deref().and_then(|n| fleet.catalog.get(n)),
            ) else {
                return (0.0, 0.0);
            };
            let (c0, m0) = waste(i, &fleet.vms[i].flavor);
            let (c1, m1) = waste(i, p);
            (c0 - c1, m0 - m1)
        })
        .collect();
    let total = deltas.iter().fold((0.0, 0.0), |acc, d| (acc.0 + d.0, acc.1 + d.1));
    let mut prefix = vec![(0.0, 0.0); deltas.len() + 1];
    for (k, d) in deltas.iter().enumerate() {
        prefix[k + 1] = (prefix[k].0 + d.0, prefix[k].1 + d.1);
    }
    let share = |got: f64, all: f64| if all > 0.0 { (got / all).max(0.0) } else { 0.0 };
    (0..=100)
        .map(|step| {
            let frac = step as f64 / 100.0;
            let k = accepted_count(ranked.len(), frac);
            let b = if ranked.is_empty() || (total.0 <= 0.0 && total.1 <= 0.0) {
                if step == 100 { 1.0 } else { 0.0 }
            } else {
                (share(prefix[k].0, total.0) + share(prefix[k].1, total.1)) / 2.0
            };
            (frac, b)
        })
        .collect()
}

pub fn benefit_at(curve: &[(f64, f64)], fraction: f64) -> f64 {
    curve.iter().filter(|p| p.0 <= fraction + 1e-12).map(|p| p.1).next_back().unwrap_or(0.0)
}

pub fn is_monotone(curve: &[(f64, f64)]) -> bool {
    curve.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-12)
}

/// Each decile's marginal benefit is at most the previous decile's plus
/// `slack`.
pub fn is_concave_trending(curve: &[(f64, f64)], slack: f64) -> bool {
    let deciles: Vec<f64> = (0..=10).map(|d| benefit_at(curve, d as f64 / 10.0)).collect();
    let marginal: Vec<f64> = deciles.windows(2).map(|w| w[1] - w[0]).collect();
    marginal.windows(2).all(|m| m[1] <= m[0] + slack)
}

/// A recommendation is erroneous when the next week's P95 demand on its
/// binding dimension (the one its proposed flavor fits most tightly) lies
/// outside `[1 - band, 1 + band]` times the recommended value
/// (`cpu_needed` / `mem_needed`). No recommendations gives rate 0.
pub fn evaluate_error_rate(
    recs: &[Recommendation],
    fleet: &Fleet,
    future: &BTreeMap<&str, &Trace>,
    band: f64,
) -> ErrorReport {
    let mut report = ErrorReport::default();
    for rec in recs {
        let (Some(trace), Some(proposed)) = (
            future.get(rec.handle.id.as_str()),
            rec.proposed_flavor.as_deref().and_then(|n| fleet.catalog.get(n)),
        ) else {
            continue;
        };
        let (Some(&cpu_need), Some(&mem_need)) = (rec.metrics.get("cpu_needed"), rec.metrics.get("mem_needed")) else {
            continue;
        };
        let (need, series) = if cpu_need / proposed.cpu >= mem_need / proposed.mem {
            (cpu_need, &trace.cpu)
        } else {
            (mem_need, &trace.mem)
        };
        let Some(actual) = p95(series) else { continue };
        report.evaluated += 1;
        if actual > need * (1.0 + band) {
            report.above_band += 1;
        } else if actual < need * (1.0 - band) {
            report.below_band += 1;
        }
    }
    if report.evaluated > 0 {
        report.rate = (report.above_band + report.below_band) as f64 / report.evaluated as f64;
    }
    report
}
