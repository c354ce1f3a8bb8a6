//! Individual treatment effects by Difference-in-Differences.
//!
//! For a user treated at `t_int`, the effect is the change in their outcome
//! from the pre-window `[t_int - Δ, t_int)` to the post-window
//! `[t_int, t_int + Δ)`, minus the same change averaged over a set of
//! untreated nearest-neighbour controls. Shared temporal trends cancel in the
//! subtraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duration::Duration;
use crate::event_model::{EventStream, Millis, Window, DAY, HOUR};
use crate::outcome::{outcome_score, DecayConfig, EventWeightTable};
use crate::policy::ActionCombo;

#[derive(Debug, Error, PartialEq)]
pub enum IteError {
    #[error("window size must be positive, got {0} ms")]
    InvalidDelta(Millis),
    #[error("control-set size must be at least 1")]
    InvalidK,
    #[error("no control users available")]
    NoControls,
    #[error("profile for {0} has {1} features, expected {2}")]
    DimensionMismatch(String, usize, usize),
    #[error("invalid profile for {0}: {1}")]
    InvalidProfile(String, String),
    #[error("half-life must be positive, got {0} ms")]
    InvalidHalfLife(Millis),
}

/// One agent action applied to one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub user_id: String,
    pub t_int: Millis,
    pub action_combo: ActionCombo,
    pub context_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDidConfig", into = "RawDidConfig")]
pub struct DidConfig {
    t_delta_ms: Millis,
    k_controls: usize,
    binarize_threshold: f64,
    half_life_ms: Millis,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDidConfig {
    t_delta: Duration,
    #[serde(default = "default_k")]
    k_controls: usize,
    #[serde(default)]
    binarize_threshold: f64,
    #[serde(default = "default_half_life")]
    half_life: Duration,
}

fn default_k() -> usize {
    DidConfig::DEFAULT_K
}

fn default_half_life() -> Duration {
    Duration(DecayConfig::DEFAULT_HALF_LIFE)
}

impl TryFrom<RawDidConfig> for DidConfig {
    type Error = IteError;
    fn try_from(r: RawDidConfig) -> Result<Self, Self::Error> {
        DidConfig::new(
            r.t_delta.millis(),
            r.k_controls,
            r.binarize_threshold,
            r.half_life.millis(),
        )
    }
}

impl From<DidConfig> for RawDidConfig {
    fn from(c: DidConfig) -> Self {
        RawDidConfig {
            t_delta: Duration(c.t_delta_ms),
            k_controls: c.k_controls,
            binarize_threshold: c.binarize_threshold,
            half_life: Duration(c.half_life_ms),
        }
    }
}

impl DidConfig {
    pub const DEFAULT_K: usize = 10;

    pub fn new(
        t_delta_ms: Millis,
        k_controls: usize,
        binarize_threshold: f64,
        half_life_ms: Millis,
    ) -> Result<Self, IteError> {
        if t_delta_ms <= 0 {
            return Err(IteError::InvalidDelta(t_delta_ms));
        }
        if k_controls == 0 {
            return Err(IteError::InvalidK);
        }
        if half_life_ms <= 0 {
            return Err(IteError::InvalidHalfLife(half_life_ms));
        }
        Ok(Self {
            t_delta_ms,
            k_controls,
            binarize_threshold,
            half_life_ms,
        })
    }

    pub fn t_delta(&self) -> Millis {
        self.t_delta_ms
    }

    pub fn k_controls(&self) -> usize {
        self.k_controls
    }

    pub fn binarize_threshold(&self) -> f64 {
        self.binarize_threshold
    }

    pub fn half_life(&self) -> Millis {
        self.half_life_ms
    }
}

impl Default for DidConfig {
    fn default() -> Self {
        Self::new(12 * HOUR, Self::DEFAULT_K, 0.0, DecayConfig::DEFAULT_HALF_LIFE).expect("valid defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IteEstimate {
    pub user_id: String,
    pub t_int: Millis,
    pub delta_y: f64,
    pub delta_y_treated: f64,
    pub delta_y_control: f64,
    pub control_ids: Vec<String>,
    pub reward_bit: u8,
}

/// Behavioural fingerprint used to find similar users: per-event-name
/// frequencies over a trailing window, L2-normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile")]
pub struct UserProfile {
    pub user_id: String,
    features: Vec<f64>,
}

#[derive(Deserialize)]
struct RawProfile {
    user_id: String,
    features: Vec<f64>,
}

impl TryFrom<RawProfile> for UserProfile {
    type Error = IteError;
    fn try_from(r: RawProfile) -> Result<Self, Self::Error> {
        UserProfile::new(r.user_id, r.features)
    }
}

impl UserProfile {
    pub const DEFAULT_WINDOW: Millis = 14 * DAY;

    /// Wraps a feature vector, which must be non-negative and either all-zero
    /// or of unit norm.
    pub fn new(user_id: impl Into<String>, features: Vec<f64>) -> Result<Self, IteError> {
        let user_id = user_id.into();
        if features.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(IteError::InvalidProfile(user_id, "negative or non-finite entry".into()));
        }
        let norm_sq: f64 = features.iter().map(|v| v * v).sum();
        if norm_sq != 0.0 && (norm_sq.sqrt() - 1.0).abs() > 1e-9 {
            return Err(IteError::InvalidProfile(
                user_id,
                format!("norm {} is neither 0 nor 1", norm_sq.sqrt()),
            ));
        }
        Ok(Self { user_id, features })
    }

    /// Frequencies of `vocabulary` events in `window`, normalised.
    pub fn from_stream(stream: &EventStream, vocabulary: &[String], window: Window) -> Self {
        let mut counts = vec![0.0; vocabulary.len()];
        for r in stream.records_in(window) {
            if let Some(i) = vocabulary.iter().position(|v| *v == r.event_name) {
                counts[i] += 1.0;
            }
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|c| *c /= norm);
        }
        Self {
            user_id: stream.user_id().to_owned(),
            features: counts,
        }
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn distance_sq(&self, other: &UserProfile) -> f64 {
        self.features
            .iter()
            .zip(&other.features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Pre and post windows around an intervention.
pub fn pre_post_windows(t_int: Millis, t_delta: Millis) -> Result<(Window, Window), IteError> {
    if t_delta <= 0 {
        return Err(IteError::InvalidDelta(t_delta));
    }
    let pre = Window::new(t_int - t_delta, t_int).expect("ordered");
    let post = Window::new(t_int, t_int + t_delta).expect("ordered");
    Ok((pre, post))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlSelection {
    /// Nearest first; ties by user id.
    pub user_ids: Vec<String>,
    /// Fewer than `k` admissible candidates were available.
    pub shortfall: bool,
}

/// The `k` admissible candidates closest to `treated` in Euclidean distance.
///
/// The treated user and any candidate rejected by `admissible` (for example,
/// users treated within `±Δ` of `t_int`) are never returned.
pub fn select_controls<F>(
    treated: &UserProfile,
    candidates: &[UserProfile],
    k: usize,
    admissible: F,
) -> Result<ControlSelection, IteError>
where
    F: Fn(&UserProfile) -> bool,
{
    if k == 0 {
        return Err(IteError::InvalidK);
    }
    let dim = treated.features.len();
    let mut scored = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.features.len() != dim {
            return Err(IteError::DimensionMismatch(c.user_id.clone(), c.features.len(), dim));
        }
        if c.user_id == treated.user_id || !admissible(c) {
            continue;
        }
        scored.push((treated.distance_sq(c), c.user_id.as_str()));
    }
    if scored.is_empty() {
        return Err(IteError::NoControls);
    }
    let shortfall = scored.len() < k;
    let by_distance = |a: &(f64, &str), b: &(f64, &str)| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1));
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, by_distance);
        scored.truncate(k);
    }
    scored.sort_by(by_distance);
    Ok(ControlSelection {
        user_ids: scored.into_iter().map(|(_, id)| id.to_owned()).collect(),
        shortfall,
    })
}

/// 1 iff `delta_y > threshold`.
pub fn binarize(delta_y: f64, threshold: f64) -> u8 {
    u8::from(delta_y > threshold)
}

/// Difference-in-Differences estimate for one intervention. Control outcomes
/// are averaged over the control set before differencing; every party is
/// decayed around the treated user's `t_int`.
pub fn did_estimate(
    treated_stream: &EventStream,
    intervention: &InterventionRecord,
    control_streams: &[&EventStream],
    table: &EventWeightTable,
    cfg: &DidConfig,
) -> Result<IteEstimate, IteError> {
    if control_streams.is_empty() {
        return Err(IteError::NoControls);
    }
    let (pre, post) = pre_post_windows(intervention.t_int, cfg.t_delta())?;
    let decay = DecayConfig::new(cfg.half_life(), intervention.t_int)
        .map_err(|_| IteError::InvalidHalfLife(cfg.half_life()))?;
    let change =
        |s: &EventStream| outcome_score(s, post, table, &decay).value - outcome_score(s, pre, table, &decay).value;
    let n = control_streams.len() as f64;
    let (mut pre_sum, mut post_sum) = (0.0, 0.0);
    for s in control_streams {
        pre_sum += outcome_score(s, pre, table, &decay).value;
        post_sum += outcome_score(s, post, table, &decay).value;
    }
    let delta_y_control = post_sum / n - pre_sum / n;
    let delta_y_treated = change(treated_stream);
    let delta_y = delta_y_treated - delta_y_control;
    Ok(IteEstimate {
        user_id: intervention.user_id.clone(),
        t_int: intervention.t_int,
        delta_y,
        delta_y_treated,
        delta_y_control,
        control_ids: control_streams.iter().map(|s| s.user_id().to_owned()).collect(),
        reward_bit: binarize(delta_y, cfg.binarize_threshold()),
    })
}
