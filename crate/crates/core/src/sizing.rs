//! Breach detection, buffered requirements and impact projection.

use serde::{Deserialize, Serialize};

use crate::catalog::Flavor;
use crate::forecast::Forecast;
use crate::recommendation::ImpactVector;
use crate::stats::SeriesStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lower: f64,
    pub upper: f64,
    pub idle: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { lower: 0.20, upper: 0.85, idle: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreachKind {
    Under,
    Over,
    None,
    SuspectedIdle,
}

impl BreachKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BreachKind::Under => "under",
            BreachKind::Over => "over",
            BreachKind::None => "none",
            BreachKind::SuspectedIdle => "suspected_idle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Cpu,
    Mem,
    Both,
}

impl Dimension {
    fn from_flags(cpu: bool, mem: bool) -> Option<Dimension> {
        match (cpu, mem) {
            (true, true) => Some(Dimension::Both),
            (true, false) => Some(Dimension::Cpu),
            (false, true) => Some(Dimension::Mem),
            (false, false) => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Cpu => "cpu",
            Dimension::Mem => "mem",
            Dimension::Both => "both",
        }
    }
}

/// Outcome of breach detection with the utilizations it was decided on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreachFinding {
    pub kind: BreachKind,
    /// Dimensions in breach; `None` only when `kind` is `None`.
    pub dimension: Option<Dimension>,
    pub cpu_p95_util: f64,
    pub mem_p95_util: f64,
    pub cpu_forecast_p95_util: f64,
    pub mem_forecast_p95_util: f64,
    pub cpu_mean_util: f64,
    pub mem_mean_util: f64,
}

/// Classifies a resource. A dimension is over (under) only when both the
/// historical and the forecast P95 utilization sit above the upper (below
/// the lower) threshold. Over wins, then suspected idle, then under.
pub fn detect_breach(
    stats_cpu: &SeriesStats,
    stats_mem: &SeriesStats,
    fc_cpu: &Forecast,
    fc_mem: &Forecast,
    th: &Thresholds,
) -> BreachFinding {
    let cpu_p95_util = stats_cpu.p95_utilization();
    let mem_p95_util = stats_mem.p95_utilization();
    let cpu_forecast_p95_util = fc_cpu.p95_forecast / stats_cpu.allocated;
    let mem_forecast_p95_util = fc_mem.p95_forecast / stats_mem.allocated;
    let cpu_mean_util = stats_cpu.mean_utilization();
    let mem_mean_util = stats_mem.mean_utilization();

    let over = Dimension::from_flags(
        cpu_p95_util > th.upper && cpu_forecast_p95_util > th.upper,
        mem_p95_util > th.upper && mem_forecast_p95_util > th.upper,
    );
    let under = Dimension::from_flags(
        cpu_p95_util < th.lower && cpu_forecast_p95_util < th.lower,
        mem_p95_util < th.lower && mem_forecast_p95_util < th.lower,
    );
    let idle = cpu_mean_util < th.idle && mem_mean_util < th.idle;

    let (kind, dimension) = if over.is_some() {
        (BreachKind::Over, over)
    } else if idle {
        (BreachKind::SuspectedIdle, Some(Dimension::Both))
    } else if under.is_some() {
        (BreachKind::Under, under)
    } else {
        (BreachKind::None, None)
    };
    BreachFinding {
        kind,
        dimension,
        cpu_p95_util,
        mem_p95_util,
        cpu_forecast_p95_util,
        mem_forecast_p95_util,
        cpu_mean_util,
        mem_mean_util,
    }
}

/// `max(historical P95, forecast P95) * (1 + buffer)` per dimension, as
/// `(cpu, mem)`.
pub fn required_allocation(
    stats_cpu: &SeriesStats,
    stats_mem: &SeriesStats,
    fc_cpu: &Forecast,
    fc_mem: &Forecast,
    buffer: f64,
) -> (f64, f64) {
    let need = |hist: f64, fc: f64| hist.max(fc) * (1.0 + buffer);
    (need(stats_cpu.p95, fc_cpu.p95_forecast), need(stats_mem.p95, fc_mem.p95_forecast))
}

/// Total capacity of the cluster the resource runs in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterCapacity {
    pub cpu: f64,
    pub mem: f64,
}

/// Cost and sustainability gain the freed capacity; reliability and
/// performance gain the added headroom, and only when fixing an `over`
/// finding. Each term is averaged over cpu and mem.
pub fn build_impact(
    current: &Flavor,
    proposed: &Flavor,
    cluster: &ClusterCapacity,
    finding: &BreachFinding,
) -> ImpactVector {
    let freed = ((current.cpu - proposed.cpu) / cluster.cpu
        + (current.mem - proposed.mem) / cluster.mem)
        / 2.0;
    let headroom = if finding.kind == BreachKind::Over {
        ((proposed.cpu - current.cpu).max(0.0) / cluster.cpu
            + (proposed.mem - current.mem).max(0.0) / cluster.mem)
            / 2.0
    } else {
        0.0
    };
    ImpactVector {
        reliability: headroom,
        performance: headroom,
        security: 0.0,
        cost: freed,
        sustainability: freed,
    }
    .clamped()
}
