//! Prioritization: objective weights, scoring, conflict arbitration, the
//! per-window cap and rejection suppression.
//!
//! Conflict arbitration is a single step: among recommendations that touch
//! the same resource, the one whose dominant objective ranks highest in the
//! static priority wins.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recommendation::{FeedbackAction, FeedbackRecord, Objective, Platform, Recommendation, Status};
use crate::time::{Millis, WEEK_MS};

pub const DEFAULT_CAP: usize = 10;
pub const CONFLICT_NOTE: &str = "deferred: conflict";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("objective {0} is missing from the configuration")]
    MissingObjective(&'static str),
    #[error("objective {0} appears more than once in the priority order")]
    DuplicateObjective(&'static str),
    #[error("static weights must strictly decrease along the priority order")]
    WeightsNotDecreasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Weights {
    pub reliability: f64,
    pub performance: f64,
    pub security: f64,
    pub cost: f64,
    pub sustainability: f64,
}

impl Weights {
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub static_priority: Vec<Objective>,
    pub static_weight: BTreeMap<Objective, f64>,
    pub targets: BTreeMap<Objective, f64>,
    pub current: BTreeMap<Objective, f64>,
    pub cap: usize,
    pub window_ms: Millis,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let static_priority = Objective::ALL.to_vec();
        let static_weight = Objective::ALL
            .iter()
            .zip([5.0, 4.0, 3.0, 2.0, 1.0])
            .map(|(o, w)| (*o, w))
            .collect();
        ObjectiveConfig {
            static_priority,
            static_weight,
            targets: BTreeMap::new(),
            current: BTreeMap::new(),
            cap: DEFAULT_CAP,
            window_ms: WEEK_MS,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        for o in Objective::ALL {
            match self.static_priority.iter().filter(|p| **p == o).count() {
                0 => return Err(StrategyError::MissingObjective(o.as_str())),
                1 => {}
                _ => return Err(StrategyError::DuplicateObjective(o.as_str())),
            }
            if !self.static_weight.contains_key(&o) {
                return Err(StrategyError::MissingObjective(o.as_str()));
            }
        }
        let ws: Vec<f64> = self.static_priority.iter().map(|o| self.static_weight[o]).collect();
        if ws.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(StrategyError::WeightsNotDecreasing);
        }
        Ok(())
    }

    /// Position in the static priority (0 = most important).
    pub fn rank_of(&self, o: Objective) -> usize {
        self.static_priority.iter().position(|p| *p == o).unwrap_or(usize::MAX)
    }

    /// Same configuration with every static weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for w in out.static_weight.values_mut() {
            *w *= c;
        }
        out
    }
}

/// `static * (1 + d)` with `d` the relative distance of the current value
/// from its target, clamped to `[0, 1]`. Objectives without both a target and
/// a current value use `d = 0`; a zero target counts as fully off (`d = 1`)
/// unless the current value is zero too.
pub fn dynamic_weights(cfg: &ObjectiveConfig) -> Result<Weights, StrategyError> {
    cfg.validate()?;
    let mut w = Weights::default();
    for o in Objective::ALL {
        let d = match (cfg.targets.get(&o), cfg.current.get(&o)) {
            (Some(&t), Some(&c)) if t == 0.0 => {
                if c == 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
            (Some(&t), Some(&c)) => (libm::fabs(t - c) / libm::fabs(t)).clamp(0.0, 1.0),
            _ => 0.0,
        };
        w.set(o, cfg.static_weight[&o] * (1.0 + d));
    }
    Ok(w)
}

/// Weighted sum of the impact vector, accumulated in objective order.
pub fn score(rec: &Recommendation, weights: &Weights) -> f64 {
    Objective::ALL
        .iter()
        .map(|o| weights.get(*o) * rec.impact.get(*o))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRecommendation {
    pub rec: Recommendation,
    pub score: f64,
    pub weights_used: Weights,
    pub conflict_group: Option<String>,
}

impl RankedRecommendation {
    pub fn new(rec: Recommendation, weights: &Weights) -> Self {
        let score = score(&rec, weights);
        RankedRecommendation { rec, score, weights_used: *weights, conflict_group: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Resolution {
    pub survivors: Vec<RankedRecommendation>,
    pub deferred: Vec<RankedRecommendation>,
}

fn group_id(platform: Platform, id: &str) -> String {
    alloc::format!("{}/{}", platform.as_str(), id)
}

/// Orders two members of one conflict group, best first.
fn arbitrate(a: &RankedRecommendation, b: &RankedRecommendation, cfg: &ObjectiveConfig) -> Ordering {
    let rank = |r: &RankedRecommendation| {
        r.rec
            .impact
            .dominant(&cfg.static_priority)
            .map_or(usize::MAX, |o| cfg.rank_of(o))
    };
    rank(a)
        .cmp(&rank(b))
        .then_with(|| b.score.total_cmp(&a.score))
        .then_with(|| a.rec.id.cmp(&b.rec.id))
}

/// Keeps one recommendation per resource. Survivors keep their input order;
/// the others are annotated and returned as deferred.
pub fn resolve_conflicts(recs: Vec<RankedRecommendation>, cfg: &ObjectiveConfig) -> Resolution {
    let mut groups: BTreeMap<(Platform, String), Vec<usize>> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        groups.entry((r.rec.handle.platform, r.rec.handle.id.clone())).or_default().push(i);
    }
    let mut winner = alloc::vec![true; recs.len()];
    let mut group_of: Vec<Option<String>> = alloc::vec![None; recs.len()];
    for ((platform, id), members) in &groups {
        if members.len() < 2 {
            continue;
        }
        let best = *members
            .iter()
            .min_by(|&&a, &&b| arbitrate(&recs[a], &recs[b], cfg))
            .expect("group is non-empty");
        for &m in members {
            winner[m] = m == best;
            group_of[m] = Some(group_id(*platform, id));
        }
    }
    let mut out = Resolution::default();
    for ((mut r, keep), group) in recs.into_iter().zip(winner).zip(group_of) {
        r.conflict_group = group;
        if keep {
            out.survivors.push(r);
        } else {
            r.rec.notes.push(String::from(CONFLICT_NOTE));
            out.deferred.push(r);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CapOutcome {
    pub surfaced: Vec<RankedRecommendation>,
    pub retained: Vec<RankedRecommendation>,
}

/// Sorts by score (descending, ties by id) and surfaces the first `k`.
pub fn rank_and_cap(mut recs: Vec<RankedRecommendation>, k: usize) -> CapOutcome {
    recs.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.rec.id.cmp(&b.rec.id)));
    let retained = recs.split_off(k.min(recs.len()));
    let mut surfaced = recs;
    for r in &mut surfaced {
        if r.rec.status == Status::Pending {
            r.rec.status = Status::Surfaced;
        }
    }
    CapOutcome { surfaced, retained }
}

/// True when `id` was rejected in the rolling window `(now - window, now]`
/// or later.
pub fn is_suppressed(id: &str, feedback: &[FeedbackRecord], now: Millis, window_ms: Millis) -> bool {
    feedback
        .iter()
        .any(|f| f.rec_id == id && f.action == FeedbackAction::Rejected && f.at > now - window_ms)
}

pub fn suppress_rejected(
    recs: Vec<Recommendation>,
    feedback: &[FeedbackRecord],
    now: Millis,
    window_ms: Millis,
) -> Vec<Recommendation> {
    recs.into_iter()
        .filter(|r| !is_suppressed(&r.id, feedback, now, window_ms))
        .collect()
}
