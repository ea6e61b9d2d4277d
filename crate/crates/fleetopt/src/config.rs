//! Run configuration: one JSON document plus command-line overrides.
//!
//! Relative paths in a config file resolve against the file's directory;
//! paths given on the command line resolve against the working directory.
//! `FLEETOPT_CONFIG` names the config file when `--config` is absent.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fleetopt_core::ObjectiveConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rightsizing::RightsizingConfig;
use crate::security::{HttpGenerator, SecurityConfig, StubGenerator, TextGenerator};
use crate::sim::{EpisodeConfig, FleetSpec};
use crate::workflow::Mode;

pub const CONFIG_ENV: &str = "FLEETOPT_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub blackboard: PathBuf,
    pub repo_root: PathBuf,
    pub runs: PathBuf,
    pub catalog: PathBuf,
    pub inventory: PathBuf,
    pub telemetry: PathBuf,
    pub fleet_state: PathBuf,
    pub audit_log: PathBuf,
    pub scan: Option<PathBuf>,
    pub doc_store: Option<PathBuf>,
    pub feedback: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            blackboard: "state/blackboard".into(),
            repo_root: "repo".into(),
            runs: "runs".into(),
            catalog: "catalog.json".into(),
            inventory: "inventory.json".into(),
            telemetry: "telemetry.csv".into(),
            fleet_state: "state/fleet-state.json".into(),
            audit_log: "state/audit.log".into(),
            scan: None,
            doc_store: None,
            feedback: None,
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.blackboard,
            &mut self.repo_root,
            &mut self.runs,
            &mut self.catalog,
            &mut self.inventory,
            &mut self.telemetry,
            &mut self.fleet_state,
            &mut self.audit_log,
        ] {
            fix(p);
        }
        for p in [&mut self.scan, &mut self.doc_store, &mut self.feedback].into_iter().flatten() {
            fix(p);
        }
    }
}

/// Which remediation text generator the security agent calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    /// Canned guides keyed by check name.
    Stub {
        #[serde(default)]
        guides: BTreeMap<String, String>,
        #[serde(default)]
        default_guide: Option<String>,
    },
    Http { endpoint: String },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Stub { guides: BTreeMap::new(), default_guide: None }
    }
}

impl GeneratorConfig {
    pub fn build(&self, timeout_ms: u64) -> Arc<dyn TextGenerator> {
        match self {
            GeneratorConfig::Stub { guides, default_guide } => Arc::new(StubGenerator {
                guides: guides.clone(),
                default_guide: default_guide.clone(),
                delay: None,
            }),
            GeneratorConfig::Http { endpoint } => Arc::new(HttpGenerator {
                endpoint: endpoint.clone(),
                timeout: Duration::from_millis(timeout_ms),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub spec: FleetSpec,
    pub episode: EpisodeConfig,
    /// Accept fraction of the operator policy.
    pub accept_fraction: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { spec: FleetSpec::default(), episode: EpisodeConfig::default(), accept_fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    /// RFC 3339 evaluation time; the system clock when absent.
    pub now: Option<String>,
    pub mode: Mode,
    pub seed: u64,
    pub rightsizing: RightsizingConfig,
    pub security: SecurityConfig,
    pub generator: GeneratorConfig,
    /// Includes the surfacing cap.
    pub objectives: ObjectiveConfig,
    pub simulation: SimulationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            now: None,
            mode: Mode::Operator,
            seed: 7,
            rightsizing: RightsizingConfig::default(),
            security: SecurityConfig::default(),
            generator: GeneratorConfig::default(),
            objectives: ObjectiveConfig::default(),
            simulation: SimulationConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config file, resolving its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.paths.resolve(&base);
        Ok(cfg)
    }

    /// Config from `explicit`, else from `FLEETOPT_CONFIG`, else defaults
    /// relative to the working directory.
    pub fn discover(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
            Some(p) => Self::load(&p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.objectives.validate().map_err(|e| ConfigError::Invalid(format!("objectives: {e}")))?;
        let r = &self.rightsizing;
        if !(r.buffer >= 0.0) || r.window_ms <= 0 || r.horizon_ms <= 0 {
            return Err(ConfigError::Invalid("rightsizing buffer, window and horizon must be positive".into()));
        }
        if !(r.thresholds.lower < r.thresholds.upper) {
            return Err(ConfigError::Invalid("rightsizing lower threshold must be below the upper one".into()));
        }
        if !(0.0..=1.0).contains(&self.simulation.accept_fraction) {
            return Err(ConfigError::Invalid("simulation accept_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
