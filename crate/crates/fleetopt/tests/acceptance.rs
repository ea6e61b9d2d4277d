//! Acceptance gate. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Run with `--nocapture` to see the lines.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use common::{fleetopt, scenario_board, scenario_catalog, scenario_copy, scenario_now, SCENARIO_VM};
use fleetopt::blackboard::{Blackboard, FixedClock};
use fleetopt::rightsizing::{analyze, recommend, Proposal, RightsizingConfig};
use fleetopt::sim::{
    ablation_curve, benefit_at, generate_fleet, is_concave_trending, is_monotone, prepare_episode, run_prepared,
    EpisodeConfig, FleetSpec, Policy,
};
use fleetopt::workflow::read_audit;
use fleetopt_core::recommendation::content_id;
use fleetopt_core::time::{DAY_MS, DEFAULT_SAMPLING_MS, WEEK_MS};
use fleetopt_core::{
    dynamic_weights, forecast, percentile, rank_and_cap, resolve_conflicts, sample_entropy, FeedbackAction,
    FeedbackRecord, Flavor, FlavorCatalog, ImpactVector, ModelChoice, ModelKind, Objective, ObjectiveConfig,
    Platform, RankedRecommendation, Recommendation, ResourceHandle, Status,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

// Pinned tolerances.
const MIN_CPU_GAIN: f64 = 5.0;
const MIN_ORACLE_SHARE: f64 = 0.85;
const MAX_RUNTIME_S: f64 = 120.0;
const MIN_DOWNSCALE: f64 = 0.90;
const MAX_CORRECTLY_SIZED: f64 = 0.10;
const MIN_TOP15_BENEFIT: f64 = 0.70;
const CONCAVITY_SLACK: f64 = 0.05;
const MAX_ERROR_RATE: f64 = 0.05;
const STEP_SHARE: f64 = 0.2;
const ORDERING_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const SAMPEN_SERIES: u64 = 50;
const MAX_RAMP_ERROR: f64 = 0.10;
const MAX_SCALE_ERROR: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!("{} {name:<22} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn window_cfg(days: i64) -> EpisodeConfig {
    let mut cfg = EpisodeConfig::default();
    cfg.rightsizing.window_ms = days * DAY_MS;
    cfg
}

fn utilization_gain() -> Outcome {
    let start = Instant::now();
    let fleet = generate_fleet(&FleetSpec::default()).unwrap();
    let cfg = EpisodeConfig::default();
    let data = prepare_episode(&fleet, &cfg).unwrap();
    let m = run_prepared(&fleet, &data, Policy::Operator { accept_fraction: 1.0 }, &cfg);
    let secs = start.elapsed().as_secs_f64();
    let gain = m.cpu_gain();
    let oracle = m.theoretical_cpu_p25 / m.util_cpu_p25_before;
    outcome(
        gain >= MIN_CPU_GAIN && gain >= MIN_ORACLE_SHARE * oracle && secs <= MAX_RUNTIME_S,
        format!(
            "cpu p25 {:.4} -> {:.4}: gain {gain:.2}x, oracle {oracle:.2}x (need >= {MIN_CPU_GAIN} and >= {MIN_ORACLE_SHARE} x oracle); mem gain {:.2}x; {secs:.1}s (<= {MAX_RUNTIME_S}s)",
            m.util_cpu_p25_before,
            m.util_cpu_p25_after,
            m.mem_gain()
        ),
    )
}

fn recommendation_mix() -> Outcome {
    let fleet = generate_fleet(&FleetSpec::default()).unwrap();
    let data = prepare_episode(&fleet, &EpisodeConfig::default()).unwrap();
    let mix = &data.plan.mix;
    let down = mix.share(mix.downscale);
    let ok_sized = mix.share(mix.correctly_sized);
    outcome(
        down >= MIN_DOWNSCALE && ok_sized <= MAX_CORRECTLY_SIZED,
        format!(
            "seed 7, {} VMs: downscale {down:.3} (>= {MIN_DOWNSCALE}), correctly sized {ok_sized:.3} (<= {MAX_CORRECTLY_SIZED}), upscale {}, no feasible {}, failed {}",
            mix.vms, mix.upscale, mix.no_feasible, mix.failed
        ),
    )
}

fn ablation() -> Outcome {
    let fleet = generate_fleet(&FleetSpec::default()).unwrap();
    let data = prepare_episode(&fleet, &EpisodeConfig::default()).unwrap();
    let curve = ablation_curve(&fleet, &data, &data.plan.ranked);
    let top = benefit_at(&curve, 0.15);
    let mono = is_monotone(&curve);
    let concave = is_concave_trending(&curve, CONCAVITY_SLACK);
    outcome(
        top >= MIN_TOP15_BENEFIT && mono && concave,
        format!(
            "benefit at top 15% {top:.3} (>= {MIN_TOP15_BENEFIT}), monotone {mono}, concave within {CONCAVITY_SLACK} {concave}, {} ranked",
            data.plan.ranked.len()
        ),
    )
}

fn error_rate() -> Outcome {
    let cfg = window_cfg(21);
    let rate = |step_share: f64| {
        let fleet = generate_fleet(&FleetSpec { step_share, ..FleetSpec::default() }).unwrap();
        let data = prepare_episode(&fleet, &cfg).unwrap();
        let m = run_prepared(&fleet, &data, Policy::Auto, &cfg);
        (m.error_rate, m.errors.evaluated)
    };
    let (flat, n_flat) = rate(0.0);
    let (stepped, n_step) = rate(STEP_SHARE);
    outcome(
        flat <= MAX_ERROR_RATE && stepped > flat,
        format!(
            "21-day window: stationary {flat:.4} over {n_flat} (<= {MAX_ERROR_RATE}), step share {STEP_SHARE} {stepped:.4} over {n_step} (> stationary)"
        ),
    )
}

fn policy_ordering() -> Outcome {
    let cfg = EpisodeConfig::default();
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in ORDERING_SEEDS {
        let fleet = generate_fleet(&FleetSpec { seed, ..FleetSpec::default() }).unwrap();
        let data = prepare_episode(&fleet, &cfg).unwrap();
        let w: Vec<f64> = [Policy::None, Policy::Reactive, Policy::Auto]
            .into_iter()
            .map(|p| run_prepared(&fleet, &data, p, &cfg).wasted_vcores)
            .collect();
        pass &= w[0] > w[1] && w[1] > w[2];
        rows.push(format!("seed {seed}: {:.1} > {:.1} > {:.1}", w[0], w[1], w[2]));
    }
    outcome(pass, format!("wasted vCores none > reactive > auto; {}", rows.join("; ")))
}

// Pipeline properties, each driven by a seeded generator.

fn cas_and_replay(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let bb = Arc::new(Blackboard::in_memory(Arc::new(FixedClock::new(0))));
    for trial in 0..1000u64 {
        let key = format!("/race/{trial}");
        bb.put(&key, json!(0), None).map_err(|e| e.to_string())?;
        let barrier = Arc::new(Barrier::new(16));
        let winners = (0..16)
            .map(|w| {
                let (bb, barrier, key) = (bb.clone(), barrier.clone(), key.clone());
                thread::spawn(move || {
                    barrier.wait();
                    bb.put(&key, json!(w), Some(1)).is_ok()
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|ok| *ok)
            .count();
        if winners != 1 {
            return Err(format!("trial {trial}: {winners} CAS winners"));
        }
    }

    for round in 0..50 {
        let dir = tempfile::tempdir().unwrap();
        let bb = Blackboard::open(dir.path(), Arc::new(FixedClock::new(0))).unwrap();
        let mut model: BTreeMap<String, (u64, serde_json::Value)> = BTreeMap::new();
        for _ in 0..rng.random_range(0..80) {
            let key = format!("/k/{}", rng.random_range(0..8));
            let value = json!(rng.random::<u32>());
            let current = model.get(&key).map_or(0, |e| e.0);
            let expected = rng.random_bool(0.5).then(|| rng.random_range(0..=current + 1));
            let res = bb.put(&key, value.clone(), expected);
            match (expected.is_some_and(|e| e != current), res) {
                (true, Ok(_)) => return Err(format!("round {round}: stale CAS accepted")),
                (true, Err(_)) => {}
                (false, Ok(_)) => {
                    model.insert(key, (current + 1, value));
                }
                (false, Err(e)) => return Err(format!("round {round}: {e}")),
            }
        }
        let mut folded = BTreeMap::new();
        for r in bb.changes_since(0).unwrap() {
            folded.insert(r.key.clone(), (r.version, r.value.clone()));
        }
        drop(bb);
        let reopened = Blackboard::open(dir.path(), Arc::new(FixedClock::new(0))).unwrap();
        let live: BTreeMap<_, _> =
            model.keys().map(|k| (k.clone(), reopened.get(k).map(|r| (r.version, r.value)).unwrap())).collect();
        if folded != model || live != model {
            return Err(format!("round {round}: replay differs from state"));
        }
    }
    Ok(())
}

fn grid_catalog() -> FlavorCatalog {
    let mut flavors = Vec::new();
    for (i, cpu) in [1.0, 2.0, 4.0, 8.0, 16.0].into_iter().enumerate() {
        for (j, per_core) in [1.0, 2.0, 4.0].into_iter().enumerate() {
            flavors.push(Flavor::new(format!("f{i}{j}"), cpu, cpu * per_core, (i * 3 + j) as f64));
        }
    }
    FlavorCatalog::new(flavors).unwrap()
}

fn no_churn_and_suppression(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let catalog = grid_catalog();
    let cfg = RightsizingConfig::default();
    for case in 0..200 {
        let cpu_level = rng.random_range(0.02..12.0);
        let mem_level = rng.random_range(0.1..50.0);
        let noise: Vec<f64> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cpu: Vec<f64> = noise.iter().map(|n| cpu_level * (1.0 + 0.1 * n)).collect();
        let mem: Vec<f64> = noise.iter().rev().map(|n| mem_level * (1.0 + 0.05 * n)).collect();
        let current = &catalog.flavors()[rng.random_range(0..15)];
        let first = analyze(&cpu, &mem, current, &catalog, &cfg, 0, 300_000).map_err(|e| e.to_string())?;
        if let Proposal::Resize(next) = first.proposal {
            let second = analyze(&cpu, &mem, &next, &catalog, &cfg, 0, 300_000).map_err(|e| e.to_string())?;
            if !matches!(second.proposal, Proposal::NoChange | Proposal::NoBreach) {
                return Err(format!("case {case}: {} -> {} -> {:?}", current.name, next.name, second.proposal));
            }
        }
    }

    let catalog = scenario_catalog();
    let now = scenario_now();
    let id = recommend(&scenario_board(), &catalog, &cfg, now).unwrap().written[0].id.clone();
    for _ in 0..20 {
        let bb = scenario_board();
        let fb = FeedbackRecord {
            rec_id: id.clone(),
            action: FeedbackAction::Rejected,
            actor: "ops".into(),
            at: now,
            modified_patch: None,
        };
        bb.put_json(&format!("/feedback/{id}"), &fb, None).unwrap();
        // The scenario's reporting week ends two and a half days after `now`.
        let later = now + rng.random_range(1..2 * DAY_MS);
        let out = recommend(&bb, &catalog, &cfg, later).unwrap();
        if out.suppressed != 1 || !out.written.is_empty() {
            return Err(format!("rejected recommendation resurfaced {} ms later", later - now));
        }
    }
    Ok(())
}

fn random_rec(rng: &mut ChaCha8Rng, salt: usize) -> Recommendation {
    let resource = rng.random_range(0..12usize);
    let mut grid = || rng.random_range(-64i32..=64) as f64 / 64.0;
    let impact = ImpactVector {
        reliability: grid(),
        performance: grid(),
        security: grid(),
        cost: grid(),
        sustainability: grid(),
    };
    Recommendation {
        id: content_id(&["accept", &resource.to_string(), &salt.to_string()]),
        version: 1,
        agent: "accept".into(),
        handle: ResourceHandle {
            platform: if resource % 2 == 0 { Platform::Vm } else { Platform::Container },
            id: format!("r{resource}"),
            project: "p".into(),
            owner: "o".into(),
            flavor_name: "f".into(),
            labels: BTreeMap::new(),
        },
        current_flavor: Some("f".into()),
        proposed_flavor: Some("g".into()),
        patch: vec![],
        impact,
        rationale: "generated".into(),
        evidence: vec![],
        status: Status::Pending,
        window_id: "2024-W31".into(),
        created_at: 0,
        metrics: BTreeMap::new(),
        remediation: None,
        notes: vec![],
    }
}

fn random_objectives(rng: &mut ChaCha8Rng) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::default();
    for _ in 0..rng.random_range(0..5) {
        let obj = Objective::ALL[rng.random_range(0..5)];
        cfg.targets.insert(obj, 2f64.powi(rng.random_range(0..4)));
        cfg.current.insert(obj, rng.random_range(0..4) as f64);
    }
    cfg
}

fn surfaced_ids(recs: &[Recommendation], cfg: &ObjectiveConfig, k: usize) -> Vec<String> {
    let w = dynamic_weights(cfg).unwrap();
    let ranked = recs.iter().cloned().map(|r| RankedRecommendation::new(r, &w)).collect();
    let res = resolve_conflicts(ranked, cfg);
    rank_and_cap(res.survivors, k).surfaced.into_iter().map(|r| r.rec.id).collect()
}

fn strategizer(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for case in 0..300 {
        let recs: Vec<Recommendation> = (0..rng.random_range(0..60)).map(|i| random_rec(rng, i)).collect();
        let cfg = random_objectives(rng);
        let w = dynamic_weights(&cfg).unwrap();
        let ranked: Vec<_> = recs.iter().cloned().map(|r| RankedRecommendation::new(r, &w)).collect();
        let res = resolve_conflicts(ranked, &cfg);
        let handles: BTreeSet<_> =
            res.survivors.iter().map(|r| (r.rec.handle.platform, r.rec.handle.id.clone())).collect();
        if handles.len() != res.survivors.len() || handles.len() + res.deferred.len() != recs.len() {
            return Err(format!("case {case}: survivors share a resource"));
        }
        for k in [0usize, 1, 10, 1000] {
            let n = res.survivors.len();
            let out = rank_and_cap(res.survivors.clone(), k);
            if out.surfaced.len() != k.min(n) || out.surfaced.len() + out.retained.len() != n {
                return Err(format!("case {case}: cap {k} surfaced {} of {n}", out.surfaced.len()));
            }
        }
        let c = [0.25, 0.5, 2.0, 3.0, 10.0][rng.random_range(0..5)];
        let k = rng.random_range(0..20);
        if surfaced_ids(&recs, &cfg, k) != surfaced_ids(&recs, &cfg.scaled(c), k) {
            return Err(format!("case {case}: scaling weights by {c} reordered the ranking"));
        }
    }
    Ok(())
}

type Check = fn(&mut ChaCha8Rng) -> Result<(), String>;

fn pipeline_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let checks: [(&str, Check); 3] = [
        ("cas/replay", cas_and_replay),
        ("no-churn/suppression", no_churn_and_suppression),
        ("cap/conflicts/scaling", strategizer),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, check) in checks {
        match check(&mut rng) {
            Ok(()) => parts.push(format!("{name} ok")),
            Err(e) => {
                pass = false;
                parts.push(format!("{name} failed: {e}"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

// Numerics against independent oracles.

fn oracle_sampen(x: &[f64], m: usize, r: f64) -> f64 {
    let t = x.len() - m;
    let (mut b, mut a) = (0u64, 0u64);
    for i in 0..t {
        for j in i + 1..t {
            let d = (0..m).map(|k| (x[i + k] - x[j + k]).abs()).fold(0.0, f64::max);
            if d <= r {
                b += 1;
                if d.max((x[i + m] - x[j + m]).abs()) <= r {
                    a += 1;
                }
            }
        }
    }
    if a == 0 {
        let base = if b >= 2 { b } else { t as u64 };
        return (base as f64 * (base - 1) as f64).ln();
    }
    -(a as f64 / b as f64).ln()
}

fn numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_sampen = 0.0f64;
    for _ in 0..SAMPEN_SERIES {
        let n = rng.random_range(20..=300usize);
        let x: Vec<f64> = match rng.random_range(0..3) {
            0 => (0..n).map(|_| rng.random::<f64>()).collect(),
            1 => (0..n).map(|t| (2.0 * PI * t as f64 / 17.0).sin() + 0.1 * rng.random::<f64>()).collect(),
            _ => (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25).collect(),
        };
        let mean = x.iter().sum::<f64>() / n as f64;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let r = 0.2 * sd;
        let got = sample_entropy(&x, 2, r).unwrap();
        worst_sampen = worst_sampen.max((got - oracle_sampen(&x, 2, r)).abs());
    }

    let mut p95_mismatch = 0;
    for _ in 0..500 {
        let v: Vec<f64> = (0..rng.random_range(1..400)).map(|_| rng.random_range(-1e6..1e6)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let idx = ((0.95 * v.len() as f64 - 1e-9).ceil() as usize).max(1) - 1;
        if percentile(&v, 95) != Some(s[idx]) {
            p95_mismatch += 1;
        }
    }

    let choice = |kind, lag| ModelChoice { kind, entropy: 0.0, variance: 1.0, seasonal_lag: lag, rationale: String::new() };
    let ramp: Vec<f64> = (0..2016).map(|t| 1.0 + 0.003 * t as f64).collect();
    let f = forecast(&ramp, &choice(ModelKind::Autoregressive, None), 0, DEFAULT_SAMPLING_MS, WEEK_MS).unwrap();
    let truth = 1.0 + 0.003 * 4031.0;
    let ramp_err = (f.values.last().unwrap().1 - truth).abs() / truth;

    let mut level = 1.0;
    let x: Vec<f64> = (0..2016)
        .map(|t| {
            level += rng.random::<f64>() - 0.5;
            level + 0.3 * (2.0 * PI * t as f64 / 288.0).sin()
        })
        .collect();
    let mut scale_err = 0.0f64;
    for c in [3.7, 1e3, 0.01] {
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        for model in [
            choice(ModelKind::Constant, None),
            choice(ModelKind::SeasonalTrend, Some(288)),
            choice(ModelKind::Autoregressive, None),
        ] {
            let fx = forecast(&x, &model, 0, DEFAULT_SAMPLING_MS, DAY_MS).unwrap();
            let fy = forecast(&y, &model, 0, DEFAULT_SAMPLING_MS, DAY_MS).unwrap();
            let scale = fx.values.iter().map(|v| (c * v.1).abs()).fold(0.0, f64::max);
            let err = fx.values.iter().zip(&fy.values).map(|(a, b)| (b.1 - c * a.1).abs()).fold(0.0, f64::max);
            scale_err = scale_err.max(err / scale);
        }
    }
    outcome(
        worst_sampen <= 1e-12 && p95_mismatch == 0 && ramp_err <= MAX_RAMP_ERROR && scale_err <= MAX_SCALE_ERROR,
        format!(
            "sampen max diff {worst_sampen:.1e} over {SAMPEN_SERIES} series; p95 mismatches {p95_mismatch}/500; AR ramp error {ramp_err:.4} (<= {MAX_RAMP_ERROR}); scale error {scale_err:.1e} (<= {MAX_SCALE_ERROR:e})"
        ),
    )
}

fn end_to_end() -> Outcome {
    let dir = scenario_copy();
    let steps: [&[&str]; 7] = [
        &["ingest"],
        &["recommend"],
        &["strategize"],
        &["emit"],
        &["feedback", "--approve-all", "--actor", "alice"],
        &["apply"],
        &["report"],
    ];
    for step in steps {
        let r = fleetopt(dir.path(), step);
        if r.code != 0 {
            return outcome(false, format!("{step:?} exited {}: {}", r.code, r.stderr.trim()));
        }
    }
    let bb = Blackboard::open(dir.path().join("state/blackboard"), Arc::new(FixedClock::new(0))).unwrap();
    let recs: Vec<Recommendation> =
        bb.list_prefix("/recommendations/rightsizing/").into_iter().map(|r| r.decode().unwrap()).collect();
    let proposal = recs.iter().find(|r| r.handle.id == SCENARIO_VM);
    let audit = read_audit(&dir.path().join("state/audit.log")).unwrap();
    let Some(rec) = proposal else {
        return outcome(false, "no proposal for the analytics VM".into());
    };
    let evidence_ok = rec.evidence.iter().all(|e| bb.get_version(&e.key, e.version).is_some());
    let artifact = dir.path().join("repo/proposals/2024-W31").join(&rec.id).join("metadata.json");
    let artifact_ok = fs::read_to_string(&artifact).is_ok_and(|s| s.contains(&rec.id));
    let feedback_ok = bb.get(&format!("/feedback/{}", rec.id)).is_some();
    let chain_ok = audit.len() == 1 && audit[0].rec_id == rec.id;
    let by_flavor: HashMap<_, _> = recs.iter().map(|r| (r.proposed_flavor.clone(), r.status)).collect();
    let pass = recs.len() == 1
        && rec.proposed_flavor.as_deref() == Some("m1.medium")
        && rec.status == Status::Applied
        && evidence_ok
        && artifact_ok
        && feedback_ok
        && chain_ok;
    outcome(
        pass,
        format!(
            "{} rightsizing proposal(s) {:?}; evidence resolvable {evidence_ok}; artifact {artifact_ok}, feedback {feedback_ok}, audit entries {} sharing id {chain_ok}",
            recs.len(),
            by_flavor,
            audit.len()
        ),
    )
}

#[test]
fn acceptance() {
    let results = [
        criterion("utilization-gain", utilization_gain),
        criterion("recommendation-mix", recommendation_mix),
        criterion("ablation", ablation),
        criterion("error-rate", error_rate),
        criterion("policy-ordering", policy_ordering),
        criterion("pipeline-properties", pipeline_properties),
        criterion("numerics", numerics),
        criterion("end-to-end", end_to_end),
    ];
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
