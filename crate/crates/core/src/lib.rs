//! Allocation-only core of the fleetopt recommender.
//!
//! Everything in this crate is a pure function over in-memory data: series
//! statistics, sample entropy, model selection and forecasting, flavor
//! catalog matching, breach detection and impact projection, and the
//! strategizer that ranks and de-conflicts recommendations. IO, persistence
//! and the command line live in the `fleetopt` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod catalog;
pub mod entropy;
pub mod forecast;
mod math;
pub mod recommendation;
pub mod sizing;
pub mod stats;
pub mod strategy;
pub mod time;

pub use catalog::{CatalogError, Flavor, FlavorCatalog, Requirement};
pub use entropy::{sample_entropy, sample_entropy_default, EntropyError, TemplateCounts};
pub use forecast::{
    forecast, select_model, Forecast, ForecastError, ModelChoice, ModelKind, SelectorConfig,
};
pub use recommendation::{
    EvidenceRef, FeedbackAction, FeedbackRecord, FieldValue, ImpactVector, Objective, PatchOp,
    Platform, Recommendation, Remediation, ResourceHandle, Severity, Status,
};
pub use sizing::{
    build_impact, detect_breach, required_allocation, BreachFinding, BreachKind,
    ClusterCapacity, Dimension, Thresholds,
};
pub use stats::{compute_stats, nearest_rank, percentile, SeriesStats, StatsError};
pub use strategy::{
    dynamic_weights, rank_and_cap, resolve_conflicts, score, suppress_rejected, CapOutcome,
    ObjectiveConfig, RankedRecommendation, Resolution, StrategyError, Weights,
};
pub use time::Millis;
