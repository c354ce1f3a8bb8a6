//! Experiment configuration document.
//!
//! A single TOML (or JSON) file holds the simulator settings, the
//! Difference-in-Differences settings, the experiment schedule, the metrics to
//! report and a reference to the operator-curated catalogue, which may also be
//! given inline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duration::Duration;
use crate::ite::{DidConfig, UserProfile};
use crate::outcome::EventWeightTable;
use crate::policy::BetaPosterior;
use crate::simulator::{SimConfig, SimError};
use crate::synthesis::{CatalogDocument, MessageCatalog, SynthesisError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Catalog(#[from] SynthesisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// 1 if the user performed any of the events, else 0.
    Binary,
    /// Number of matching events.
    Count,
    /// Sum of the matching events' values.
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub kind: MetricKind,
    pub events: Vec<String>,
}

/// How decisions are keyed in the posterior store.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// One posterior table per user, with empirical-Bayes priors from similar users.
    #[default]
    User,
    /// A single shared table.
    Global,
    /// Two tables split at the median warm-up activity.
    ActivityTier,
}

/// A rules-based message sent to every user, treated and control alike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineMessages {
    pub every_n_cycles: usize,
    /// Rate multiplier on lifted events over the effect window.
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CatalogSource {
    Path(PathBuf),
    Inline(CatalogDocument),
}

fn default_cycle() -> Duration {
    Duration::days(1)
}

fn default_warmup() -> Duration {
    Duration::days(14)
}

fn default_profile_window() -> Duration {
    Duration(UserProfile::DEFAULT_WINDOW)
}

fn default_true() -> bool {
    true
}

fn default_smoothing() -> f64 {
    EventWeightTable::DEFAULT_SMOOTHING
}

fn default_level() -> f64 {
    0.99
}

fn default_resamples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub did: DidConfig,
    pub catalog: CatalogSource,
    pub n_cycles: usize,
    pub treatment_fraction: f64,
    #[serde(default)]
    pub metrics: Vec<MetricSpec>,
    #[serde(default = "default_cycle")]
    pub cycle_length: Duration,
    /// Organic history simulated before the first cycle, used to fit event
    /// weights and build pre-period profiles.
    #[serde(default = "default_warmup")]
    pub warmup: Duration,
    #[serde(default = "default_profile_window")]
    pub profile_window: Duration,
    /// Maximum agentic sends per user over the whole experiment.
    #[serde(default)]
    pub frequency_cap: Option<u32>,
    #[serde(default)]
    pub context: ContextMode,
    #[serde(default = "default_true")]
    pub empirical_bayes: bool,
    #[serde(default)]
    pub default_prior: BetaPosterior,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub baseline: Option<BaselineMessages>,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Loads a config file; a relative catalogue path is resolved against the
    /// config file's directory and the catalogue is inlined.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let CatalogSource::Path(p) = &cfg.catalog {
            let full = match path.parent() {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.clone(),
            };
            let catalog = MessageCatalog::load(&full)?;
            cfg.catalog = CatalogSource::Inline(catalog.into());
        }
        Ok(cfg)
    }

    /// The inline catalogue; path references must be resolved by [`ExperimentConfig::load`].
    pub fn catalog(&self) -> Result<MessageCatalog, ConfigError> {
        match &self.catalog {
            CatalogSource::Inline(doc) => Ok(MessageCatalog::try_from(doc.clone())?),
            CatalogSource::Path(p) => Ok(MessageCatalog::load(p)?),
        }
    }

    /// First cycle start.
    pub fn start(&self) -> i64 {
        self.warmup.millis()
    }

    /// End of the last cycle.
    pub fn end(&self) -> i64 {
        self.start() + self.n_cycles as i64 * self.cycle_length.millis()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        self.sim.validate()?;
        if !(self.treatment_fraction > 0.0 && self.treatment_fraction < 1.0) {
            return bad("treatment_fraction must lie strictly between 0 and 1");
        }
        let cycle = self.cycle_length.millis();
        let delta = self.did.t_delta();
        if cycle <= 0 {
            return bad("cycle_length must be positive");
        }
        if 2 * delta > cycle {
            return bad("t_delta must be at most half the cycle length so pre and post windows of consecutive cycles stay disjoint");
        }
        if self.sim.effect_duration.millis() > cycle - delta {
            return bad("effect_duration must end before the next cycle's pre-window");
        }
        if self.warmup.millis() < delta {
            return bad("warmup must cover the first pre-window");
        }
        if self.profile_window.millis() <= 0 {
            return bad("profile_window must be positive");
        }
        if self.end() > self.sim.horizon.millis() {
            return bad("sim.horizon is shorter than warmup + n_cycles * cycle_length");
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad("ci_level must lie strictly between 0 and 1");
        }
        if self.bootstrap_resamples == 0 {
            return bad("bootstrap_resamples must be positive");
        }
        if !(self.smoothing.is_finite() && self.smoothing > 0.0) {
            return bad("smoothing must be positive");
        }
        if let Some(b) = self.baseline {
            if b.every_n_cycles == 0 || !(b.multiplier.is_finite() && b.multiplier >= 0.0) {
                return bad("baseline needs every_n_cycles >= 1 and a non-negative multiplier");
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.metrics {
            if !names.insert(&m.name) {
                return bad("metric names must be unique");
            }
            if m.events.is_empty() {
                return bad("every metric needs at least one event");
            }
        }
        let catalog = self.catalog()?;
        if let crate::simulator::LiftModel::PreferredLabel { set, .. } = &self.sim.lift {
            if catalog.space().set(set).is_none() {
                return Err(ConfigError::Invalid(format!(
                    "lift set {set:?} is not in the action space"
                )));
            }
        }
        Ok(())
    }
}
