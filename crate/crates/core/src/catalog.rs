//! Flavor catalog and nearest-feasible matching.
//!
//! A flavor is feasible for a requirement when it covers the required CPU,
//! memory and every extra attribute the requirement names. Among feasible
//! flavors the winner minimizes the Euclidean distance to the requirement,
//! with every dimension divided by its catalog-wide maximum so cores and GiB
//! weigh the same. Ties go to the lower `cost_rank`, then to the name.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CatalogError {
    #[error("catalog has no flavors")]
    Empty,
    #[error("duplicate flavor name {0:?}")]
    DuplicateName(String),
    #[error("flavor {0:?} must have positive cpu and memory")]
    InvalidFlavor(String),
    #[error("no flavor covers cpu {cpu}, mem {mem} GiB and the required extras")]
    NoFeasibleFlavor { cpu: f64, mem: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flavor {
    pub name: String,
    pub cpu: f64,
    pub mem: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
    pub cost_rank: f64,
}

impl Flavor {
    pub fn new(name: impl Into<String>, cpu: f64, mem: f64, cost_rank: f64) -> Self {
        Flavor { name: name.into(), cpu, mem, extra: BTreeMap::new(), cost_rank }
    }

    pub fn with_extra(mut self, key: impl Into<String>, value: f64) -> Self {
        self.extra.insert(key.into(), value);
        self
    }

    pub fn covers(&self, req: &Requirement) -> bool {
        self.cpu >= req.cpu
            && self.mem >= req.mem
            && req
                .extra
                .iter()
                .all(|(k, v)| self.extra.get(k).is_some_and(|have| have >= v))
    }
}

/// Per-dimension demand a flavor must satisfy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Requirement {
    pub cpu: f64,
    pub mem: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl Requirement {
    pub fn new(cpu: f64, mem: f64) -> Self {
        Requirement { cpu, mem, extra: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawCatalog {
    flavors: Vec<Flavor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCatalog", into = "RawCatalog")]
pub struct FlavorCatalog {
    flavors: Vec<Flavor>,
    max_cpu: f64,
    max_mem: f64,
    max_extra: BTreeMap<String, f64>,
}

impl TryFrom<RawCatalog> for FlavorCatalog {
    type Error = CatalogError;

    fn try_from(raw: RawCatalog) -> Result<Self, Self::Error> {
        FlavorCatalog::new(raw.flavors)
    }
}

impl From<FlavorCatalog> for RawCatalog {
    fn from(c: FlavorCatalog) -> Self {
        RawCatalog { flavors: c.flavors }
    }
}

impl FlavorCatalog {
    pub fn new(flavors: Vec<Flavor>) -> Result<Self, CatalogError> {
        if flavors.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut names = BTreeSet::new();
        let mut max_extra: BTreeMap<String, f64> = BTreeMap::new();
        for f in &flavors {
            if !(f.cpu > 0.0 && f.mem > 0.0) || !f.cpu.is_finite() || !f.mem.is_finite() {
                return Err(CatalogError::InvalidFlavor(f.name.clone()));
            }
            if !names.insert(f.name.as_str()) {
                return Err(CatalogError::DuplicateName(f.name.clone()));
            }
            for (k, v) in &f.extra {
                let e = max_extra.entry(k.clone()).or_insert(0.0);
                *e = e.max(*v);
            }
        }
        let max_cpu = flavors.iter().map(|f| f.cpu).fold(0.0, f64::max);
        let max_mem = flavors.iter().map(|f| f.mem).fold(0.0, f64::max);
        Ok(FlavorCatalog { flavors, max_cpu, max_mem, max_extra })
    }

    pub fn flavors(&self) -> &[Flavor] {
        &self.flavors
    }

    pub fn get(&self, name: &str) -> Option<&Flavor> {
        self.flavors.iter().find(|f| f.name == name)
    }

    pub fn len(&self) -> usize {
        self.flavors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flavors.is_empty()
    }

    /// Squared normalized distance between a flavor and a requirement over
    /// cpu, mem and the extras the requirement names.
    pub fn distance_sq(&self, flavor: &Flavor, req: &Requirement) -> f64 {
        let norm = |have: f64, want: f64, max: f64| {
            let scale = if max > 0.0 { max } else { 1.0 };
            let d = (have - want) / scale;
            d * d
        };
        let mut total = norm(flavor.cpu, req.cpu, self.max_cpu) + norm(flavor.mem, req.mem, self.max_mem);
        for (k, want) in &req.extra {
            let have = flavor.extra.get(k).copied().unwrap_or(0.0);
            let max = self.max_extra.get(k).copied().unwrap_or(0.0);
            total += norm(have, *want, max);
        }
        total
    }

    pub fn distance(&self, flavor: &Flavor, req: &Requirement) -> f64 {
        math::sqrt(self.distance_sq(flavor, req))
    }

    /// The closest flavor that covers `req`.
    pub fn nearest_feasible(&self, req: &Requirement) -> Result<&Flavor, CatalogError> {
        let mut best: Option<(&Flavor, f64)> = None;
        for f in self.flavors.iter().filter(|f| f.covers(req)) {
            let d = self.distance_sq(f, req);
            let better = match best {
                None => true,
                Some((b, bd)) => match d.total_cmp(&bd) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => match f.cost_rank.total_cmp(&b.cost_rank) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => f.name < b.name,
                    },
                },
            };
            if better {
                best = Some((f, d));
            }
        }
        best.map(|(f, _)| f)
            .ok_or(CatalogError::NoFeasibleFlavor { cpu: req.cpu, mem: req.mem })
    }

    /// Like [`nearest_feasible`](Self::nearest_feasible) but returns `None`
    /// when the winner is the flavor the resource already has.
    pub fn select(&self, req: &Requirement, current: &str) -> Result<Option<&Flavor>, CatalogError> {
        let winner = self.nearest_feasible(req)?;
        Ok((winner.name != current).then_some(winner))
    }
}
