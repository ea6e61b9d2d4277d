//! Synthetic VM fleets: flavor mix, per-VM usage processes and the
//! post-generation distribution check.

use std::f64::consts::TAU;

use fleetopt_core::time::{DAY_MS, DEFAULT_SAMPLING_MS, WEEK_MS};
use fleetopt_core::{Flavor, FlavorCatalog, Millis, Platform, ResourceHandle};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 2024-01-01T00:00:00Z, the first sample of every synthetic fleet.
pub const SIM_EPOCH_MS: Millis = 1_704_067_200_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible fleet spec: {0}")]
    InfeasibleSpec(String),
    #[error("episode needs {needed} days of telemetry but the fleet has {available}")]
    NotEnoughHistory { needed: i64, available: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetSpec {
    pub n_vms: usize,
    pub seed: u64,
    /// Share of VMs whose mean CPU utilization stays below 10%.
    pub share_below_10pct: f64,
    /// Share of VMs that together carry at least half the CPU-hours.
    pub heavy_tail_share: f64,
    /// Share of VMs that are idle on both CPU and memory (mean below 5%).
    /// Drawn from the below-10% population.
    pub idle_share: f64,
    /// Bound on the relative change of a VM's weekly mean CPU between
    /// consecutive weeks.
    pub weekly_variance_bound: f64,
    pub duration_days: i64,
    pub sampling_ms: Millis,
    /// Share of VMs whose demand jumps by `step_factor` (up or down at
    /// random) at the start of the final week.
    pub step_share: f64,
    pub step_factor: f64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            n_vms: 528,
            seed: 7,
            share_below_10pct: 0.85,
            heavy_tail_share: 0.05,
            idle_share: 0.18,
            weekly_variance_bound: 0.15,
            duration_days: 90,
            sampling_ms: DEFAULT_SAMPLING_MS,
            step_share: 0.0,
            step_factor: 1.8,
        }
    }
}

const CPU_GRID: [f64; 16] = [0.125, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0];
const MEM_GRID: [f64; 19] = [
    0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0, 96.0, 128.0, 192.0, 256.0,
];

pub fn flavor_name(cpu: f64, mem: f64) -> String {
    format!("c{cpu}-m{mem}")
}

/// Every (cpu, mem) pair of a fine-grained grid, priced at `cpu + mem / 4`.
pub fn product_grid_catalog() -> FlavorCatalog {
    let flavors = CPU_GRID
        .iter()
        .flat_map(|&c| MEM_GRID.iter().map(move |&m| Flavor::new(flavor_name(c, m), c, m, c + m / 4.0)))
        .collect();
    FlavorCatalog::new(flavors).expect("grid names are unique")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageClass {
    Idle,
    Low,
    Moderate,
    Heavy,
}

/// Parameters of one VM's demand process. Levels are fractions of the
/// original allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmProfile {
    pub handle: ResourceHandle,
    pub flavor: Flavor,
    pub class: UsageClass,
    pub cpu_level: f64,
    pub cpu_daily_amp: f64,
    pub cpu_phase: f64,
    pub cpu_noise_sd: f64,
    pub mem_level: f64,
    pub mem_noise_sd: f64,
    pub step: Option<f64>,
}

/// Demand in cores and GiB, one value per sampling period.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub cpu: Vec<f64>,
    pub mem: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetCheck {
    pub share_below_10pct: f64,
    pub heavy_tail_cpu_hours_share: f64,
    pub max_single_vm_cpu_hours_share: f64,
    pub max_weekly_change: f64,
    pub share_at_most_8_cores: f64,
    pub share_above_64_gib: f64,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    pub spec: FleetSpec,
    pub catalog: FlavorCatalog,
    pub vms: Vec<VmProfile>,
    pub check: FleetCheck,
}

const CPU_RHO: f64 = 0.8;
const MEM_RHO: f64 = 0.98;

impl Fleet {
    pub fn samples_per_day(&self) -> usize {
        (DAY_MS / self.spec.sampling_ms) as usize
    }

    pub fn total_samples(&self) -> usize {
        self.spec.duration_days as usize * self.samples_per_day()
    }

    /// Index of the first sample of the final week.
    pub fn final_week_start(&self) -> usize {
        self.total_samples() - (WEEK_MS / self.spec.sampling_ms) as usize
    }

    pub fn sample_time(&self, index: usize) -> Millis {
        SIM_EPOCH_MS + index as Millis * self.spec.sampling_ms
    }

    pub fn handles(&self) -> Vec<ResourceHandle> {
        self.vms.iter().map(|v| v.handle.clone()).collect()
    }

    /// Regenerates the demand of VM `index`. Deterministic in `FleetSpec::seed`.
    pub fn trace(&self, index: usize) -> Trace {
        let vm = &self.vms[index];
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index as u64 + 1);
        let n = self.total_samples();
        let per_day = self.samples_per_day() as f64;
        let step_at = self.final_week_start();
        let cpu_innov = vm.cpu_noise_sd * (1.0 - CPU_RHO * CPU_RHO).sqrt();
        let mem_innov = vm.mem_noise_sd * (1.0 - MEM_RHO * MEM_RHO).sqrt();
        let mut x = vm.cpu_noise_sd * rng.sample::<f64, _>(StandardNormal);
        let mut y = vm.mem_noise_sd * rng.sample::<f64, _>(StandardNormal);
        let mut cpu = Vec::with_capacity(n);
        let mut mem = Vec::with_capacity(n);
        for t in 0..n {
            x = CPU_RHO * x + cpu_innov * rng.sample::<f64, _>(StandardNormal);
            y = MEM_RHO * y + mem_innov * rng.sample::<f64, _>(StandardNormal);
            let scale = match vm.step {
                Some(f) if t >= step_at => f,
                _ => 1.0,
            };
            let season = vm.cpu_daily_amp * (TAU * t as f64 / per_day + vm.cpu_phase).sin();
            let c = vm.flavor.cpu * vm.cpu_level * scale * (1.0 + season + x).max(0.0);
            let m = vm.flavor.mem * vm.mem_level * scale.sqrt() * (1.0 + y).max(0.0);
            cpu.push(c.min(vm.flavor.cpu));
            mem.push(m.min(vm.flavor.mem));
        }
        Trace { cpu, mem }
    }
}

fn validate(spec: &FleetSpec) -> Result<(), SimError> {
    let bad = |m: &str| Err(SimError::InfeasibleSpec(m.to_string()));
    if spec.n_vms == 0 {
        return bad("n_vms must be positive");
    }
    if !(spec.share_below_10pct > 0.0 && spec.share_below_10pct < 1.0) {
        return bad("share_below_10pct must lie in (0, 1)");
    }
    if !(0.0..1.0).contains(&spec.heavy_tail_share) {
        return bad("heavy_tail_share must lie in [0, 1)");
    }
    if spec.share_below_10pct + spec.heavy_tail_share > 1.0 {
        return bad("share_below_10pct + heavy_tail_share exceeds 1");
    }
    if !(0.0..=spec.share_below_10pct).contains(&spec.idle_share) {
        return bad("idle_share must lie in [0, share_below_10pct]");
    }
    if !(0.0..=1.0).contains(&spec.step_share) || spec.step_factor <= 0.0 {
        return bad("step_share must lie in [0, 1] and step_factor be positive");
    }
    if spec.weekly_variance_bound <= 0.0 {
        return bad("weekly_variance_bound must be positive");
    }
    if spec.sampling_ms <= 0 || DAY_MS % spec.sampling_ms != 0 {
        return bad("sampling period must divide a day");
    }
    if spec.duration_days < 15 {
        return bad("duration must cover at least two weeks of history plus the final week");
    }
    Ok(())
}

fn count(share: f64, n: usize) -> usize {
    ((share * n as f64).round() as usize).min(n)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, options: &[(T, f64)]) -> T {
    let total: f64 = options.iter().map(|o| o.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(v, w) in options {
        if u < w {
            return v;
        }
        u -= w;
    }
    options[options.len() - 1].0
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

#[derive(Clone, Copy)]
enum Size {
    Small,
    Medium,
    Large,
}

fn profile(i: usize, class: UsageClass, rng: &mut ChaCha8Rng, catalog: &FlavorCatalog) -> VmProfile {
    let (cpu, mem, size) = match class {
        UsageClass::Heavy => {
            let mem = if rng.random::<f64>() < 0.2 { 128.0 } else { 64.0 };
            (32.0, mem, Size::Large)
        }
        _ => match pick(rng, &[(Size::Small, 0.72), (Size::Medium, 0.12), (Size::Large, 0.16)]) {
            Size::Small => {
                let c = pick(rng, &[(1.0, 0.25), (2.0, 0.4), (4.0, 0.35)]);
                (c, c * pick(rng, &[(2.0, 0.6), (4.0, 0.4)]), Size::Small)
            }
            Size::Medium => (8.0, pick(rng, &[(16.0, 0.7), (32.0, 0.3)]), Size::Medium),
            Size::Large => {
                let c = pick(rng, &[(48.0, 0.25), (64.0, 0.75)]);
                (c, c, Size::Large)
            }
        },
    };
    let flavor = catalog.get(&flavor_name(cpu, mem)).expect("original flavors are on the grid").clone();
    let busy_mem = |rng: &mut ChaCha8Rng| match size {
        Size::Large => rng.random_range(0.06..0.15),
        _ => rng.random_range(0.45..0.75),
    };
    let (cpu_level, cpu_daily_amp, cpu_noise_sd, mem_level) = match class {
        UsageClass::Idle => (
            rng.random_range(0.005..0.03),
            rng.random_range(0.18..0.28),
            rng.random_range(0.08..0.12),
            rng.random_range(0.02..0.045),
        ),
        UsageClass::Low => (
            log_uniform(rng, 0.03, 0.095),
            rng.random_range(0.18..0.28),
            rng.random_range(0.08..0.12),
            busy_mem(rng),
        ),
        UsageClass::Moderate => (
            rng.random_range(0.10..0.135),
            rng.random_range(0.18..0.28),
            rng.random_range(0.08..0.12),
            busy_mem(rng),
        ),
        UsageClass::Heavy => (
            rng.random_range(0.66..0.72),
            rng.random_range(0.05..0.08),
            rng.random_range(0.04..0.05),
            rng.random_range(0.50..0.70),
        ),
    };
    VmProfile {
        handle: ResourceHandle {
            platform: Platform::Vm,
            id: format!("vm-{i:04}"),
            project: format!("project-{:02}", i % 12),
            owner: format!("team-{}", i % 7),
            flavor_name: flavor.name.clone(),
            labels: Default::default(),
        },
        flavor,
        class,
        cpu_level,
        cpu_daily_amp,
        cpu_phase: rng.random_range(0.0..TAU),
        cpu_noise_sd,
        mem_level,
        mem_noise_sd: rng.random_range(0.02..0.04),
        step: None,
    }
}

fn weekly_means(series: &[f64], per_week: usize, end: usize) -> Vec<f64> {
    series[..end].chunks_exact(per_week).map(|w| w.iter().sum::<f64>() / per_week as f64).collect()
}

/// Measures the generated fleet against its `FleetSpec` distribution targets.
/// Weeks after a step change are excluded from the weekly-variance figure.
pub fn check_fleet(fleet: &Fleet) -> FleetCheck {
    let n = fleet.vms.len();
    let per_week = (WEEK_MS / fleet.spec.sampling_ms) as usize;
    let stationary_end = fleet.final_week_start();
    let per_vm: Vec<(f64, f64, f64)> = par_map(n, |i| {
        let tr = fleet.trace(i);
        let alloc = fleet.vms[i].flavor.cpu;
        let cpu_hours: f64 = tr.cpu.iter().sum();
        let mean_util = cpu_hours / tr.cpu.len() as f64 / alloc;
        let end = if fleet.vms[i].step.is_some() { stationary_end } else { tr.cpu.len() };
        let weeks = weekly_means(&tr.cpu, per_week, end);
        let change = weeks
            .windows(2)
            .map(|w| if w[0] > 0.0 { (w[1] - w[0]).abs() / w[0] } else { 0.0 })
            .fold(0.0, f64::max);
        (mean_util, cpu_hours, change)
    });
    let below = per_vm.iter().filter(|v| v.0 < 0.10).count() as f64 / n as f64;
    let total_hours: f64 = per_vm.iter().map(|v| v.1).sum();
    let mut hours: Vec<f64> = per_vm.iter().map(|v| v.1).collect();
    hours.sort_by(|a, b| b.total_cmp(a));
    let k = count(fleet.spec.heavy_tail_share, n);
    let heavy = hours[..k].iter().sum::<f64>() / total_hours;
    FleetCheck {
        share_below_10pct: below,
        heavy_tail_cpu_hours_share: heavy,
        max_single_vm_cpu_hours_share: hours[0] / total_hours,
        max_weekly_change: per_vm.iter().map(|v| v.2).fold(0.0, f64::max),
        share_at_most_8_cores: fleet.vms.iter().filter(|v| v.flavor.cpu <= 8.0).count() as f64 / n as f64,
        share_above_64_gib: fleet.vms.iter().filter(|v| v.flavor.mem > 64.0).count() as f64 / n as f64,
    }
}

/// Builds a seeded fleet and verifies it against `spec`. The below-10%
/// share may fall short of the target by at most 5 points.
pub fn generate_fleet(spec: &FleetSpec) -> Result<Fleet, SimError> {
    validate(spec)?;
    let catalog = product_grid_catalog();
    let n = spec.n_vms;
    let n_heavy = count(spec.heavy_tail_share, n);
    let n_low = count(spec.share_below_10pct, n).min(n - n_heavy);
    let n_idle = count(spec.idle_share, n).min(n_low);
    let mut classes = Vec::with_capacity(n);
    classes.extend(std::iter::repeat_n(UsageClass::Heavy, n_heavy));
    classes.extend(std::iter::repeat_n(UsageClass::Idle, n_idle));
    classes.extend(std::iter::repeat_n(UsageClass::Low, n_low - n_idle));
    classes.resize(n, UsageClass::Moderate);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    classes.shuffle(&mut rng);
    let mut vms: Vec<VmProfile> =
        classes.iter().enumerate().map(|(i, &c)| profile(i, c, &mut rng, &catalog)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(count(spec.step_share, n)) {
        let up = rng.random::<bool>();
        vms[i].step = Some(if up { spec.step_factor } else { 1.0 / spec.step_factor });
    }

    let mut fleet = Fleet {
        spec: spec.clone(),
        catalog,
        vms,
        check: FleetCheck {
            share_below_10pct: 0.0,
            heavy_tail_cpu_hours_share: 0.0,
            max_single_vm_cpu_hours_share: 0.0,
            max_weekly_change: 0.0,
            share_at_most_8_cores: 0.0,
            share_above_64_gib: 0.0,
        },
    };
    let check = check_fleet(&fleet);
    if check.share_below_10pct < spec.share_below_10pct - 0.05 {
        return Err(SimError::InfeasibleSpec(format!(
            "only {:.3} of VMs average below 10% CPU, target {:.3}",
            check.share_below_10pct, spec.share_below_10pct
        )));
    }
    if n_heavy > 0 && check.heavy_tail_cpu_hours_share < 0.5 {
        return Err(SimError::InfeasibleSpec(format!(
            "the top {n_heavy} VMs carry {:.3} of CPU-hours, below half",
            check.heavy_tail_cpu_hours_share
        )));
    }
    if check.max_weekly_change >= spec.weekly_variance_bound {
        return Err(SimError::InfeasibleSpec(format!(
            "week-to-week CPU change reaches {:.3}, bound {:.3}",
            check.max_weekly_change, spec.weekly_variance_bound
        )));
    }
    fleet.check = check;
    Ok(fleet)
}

/// Maps `f` over `0..n` on all cores, keeping index order.
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}
