//! Synthetic fleet simulator and evaluation metrics.

mod episode;
mod fleet;

pub use episode::{
    ablation_curve, accepted_count, benefit_at, evaluate_error_rate, is_concave_trending, is_monotone,
    prepare_episode, run_episode, run_prepared, EpisodeConfig, EpisodeData, EpisodeError, EpisodeMetrics,
    ErrorReport, Plan, Policy, ReactiveConfig, RecommendationMix, VmWeek,
};
pub use fleet::{
    check_fleet, flavor_name, generate_fleet, product_grid_catalog, Fleet, FleetCheck, FleetSpec, SimError,
    Trace, UsageClass, VmProfile, SIM_EPOCH_MS,
};
