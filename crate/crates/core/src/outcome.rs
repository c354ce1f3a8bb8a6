//! Outcome scoring: a user's outcome over a window is the sum over observed
//! events of an event-informativeness weight times a temporal decay weight
//! (times the record's metadata value, 1.0 by default).
//!
//! Event weights are log-likelihood ratios of seeing the event given that a
//! goal event follows within the attribution window, versus given that none
//! does. Temporal weights halve every `half_life` away from a reference time.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_model::{EventStream, GoalSpec, Millis, Window, HOUR};

#[derive(Debug, Error, PartialEq)]
pub enum OutcomeError {
    #[error("no event streams to fit weights on")]
    EmptyInput,
    #[error("smoothing must be positive and finite, got {0}")]
    InvalidSmoothing(f64),
    #[error("half-life must be positive, got {0} ms")]
    InvalidHalfLife(Millis),
    #[error("weight for {0:?} is not finite")]
    NonFiniteWeight(String),
}

/// Per-event log-likelihood-ratio weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeightTable")]
pub struct EventWeightTable {
    smoothing: f64,
    goal: GoalSpec,
    weights: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
struct RawWeightTable {
    smoothing: f64,
    goal: GoalSpec,
    weights: BTreeMap<String, f64>,
}

impl TryFrom<RawWeightTable> for EventWeightTable {
    type Error = OutcomeError;
    fn try_from(raw: RawWeightTable) -> Result<Self, Self::Error> {
        EventWeightTable::from_weights(raw.weights, raw.smoothing, raw.goal)
    }
}

impl EventWeightTable {
    pub const DEFAULT_SMOOTHING: f64 = 1.0;

    /// Builds a table from explicit weights.
    pub fn from_weights(weights: BTreeMap<String, f64>, smoothing: f64, goal: GoalSpec) -> Result<Self, OutcomeError> {
        if !(smoothing.is_finite() && smoothing > 0.0) {
            return Err(OutcomeError::InvalidSmoothing(smoothing));
        }
        if let Some((name, _)) = weights.iter().find(|(_, w)| !w.is_finite()) {
            return Err(OutcomeError::NonFiniteWeight(name.clone()));
        }
        Ok(Self {
            smoothing,
            goal,
            weights,
        })
    }

    /// Weight of `event_name`; events never seen while fitting weigh 0.
    pub fn weight(&self, event_name: &str) -> f64 {
        self.weights.get(event_name).copied().unwrap_or(0.0)
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn goal(&self) -> &GoalSpec {
        &self.goal
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weight table serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Occurrence counts behind a fitted weight.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GoalCounts {
    pub followed: u64,
    pub not_followed: u64,
}

/// Counts, per event name, the occurrences followed by a goal event within
/// the attribution window `[t, t + window)` and those that are not. A goal
/// occurrence is only credited by goals strictly later in the stream.
pub fn count_goal_follow_ups<'a, I>(streams: I, goal: &GoalSpec) -> HashMap<String, GoalCounts>
where
    I: IntoIterator<Item = &'a EventStream>,
{
    let window = goal.attribution_window();
    let mut counts: HashMap<String, GoalCounts> = HashMap::new();
    for stream in streams {
        let records = stream.records();
        // next_goal[i]: time of the first goal record at index > i.
        let mut next_goal: Option<Millis> = None;
        let mut labels = vec![false; records.len()];
        for (i, r) in records.iter().enumerate().rev() {
            labels[i] = matches!(next_goal, Some(t) if t < r.timestamp.saturating_add(window));
            if goal.is_goal(&r.event_name) {
                next_goal = Some(r.timestamp);
            }
        }
        for (r, followed) in records.iter().zip(labels) {
            let c = counts.entry(r.event_name.clone()).or_default();
            if followed {
                c.followed += 1;
            } else {
                c.not_followed += 1;
            }
        }
    }
    counts
}

/// Fits log-likelihood-ratio event weights with additive smoothing `smoothing`:
///
/// `w_e = ln( ((n_goal + a) / (N_goal + 2a)) / ((n_nogoal + a) / (N_nogoal + 2a)) )`.
pub fn fit_event_weights<'a, I>(streams: I, goal: &GoalSpec, smoothing: f64) -> Result<EventWeightTable, OutcomeError>
where
    I: IntoIterator<Item = &'a EventStream>,
{
    if !(smoothing.is_finite() && smoothing > 0.0) {
        return Err(OutcomeError::InvalidSmoothing(smoothing));
    }
    let mut streams = streams.into_iter().peekable();
    if streams.peek().is_none() {
        return Err(OutcomeError::EmptyInput);
    }
    let counts = count_goal_follow_ups(streams, goal);
    let total_goal: u64 = counts.values().map(|c| c.followed).sum();
    let total_nogoal: u64 = counts.values().map(|c| c.not_followed).sum();
    let a = smoothing;
    let denom_goal = total_goal as f64 + 2.0 * a;
    let denom_nogoal = total_nogoal as f64 + 2.0 * a;
    let weights = counts
        .into_iter()
        .map(|(name, c)| {
            let p_goal = (c.followed as f64 + a) / denom_goal;
            let p_nogoal = (c.not_followed as f64 + a) / denom_nogoal;
            (name, (p_goal / p_nogoal).ln())
        })
        .collect();
    EventWeightTable::from_weights(weights, smoothing, goal.clone())
}

/// Exponential decay around a reference instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecayConfig {
    half_life_ms: Millis,
    reference: Millis,
}

impl DecayConfig {
    pub const DEFAULT_HALF_LIFE: Millis = 12 * HOUR;

    pub fn new(half_life_ms: Millis, reference: Millis) -> Result<Self, OutcomeError> {
        if half_life_ms <= 0 {
            return Err(OutcomeError::InvalidHalfLife(half_life_ms));
        }
        Ok(Self {
            half_life_ms,
            reference,
        })
    }

    pub fn half_life(&self) -> Millis {
        self.half_life_ms
    }

    pub fn reference(&self) -> Millis {
        self.reference
    }

    pub fn with_reference(self, reference: Millis) -> Self {
        Self { reference, ..self }
    }
}

/// `0.5^(|t - reference| / half_life)`, symmetric around the reference.
pub fn temporal_weight(t: Millis, cfg: &DecayConfig) -> f64 {
    let elapsed = t.abs_diff(cfg.reference) as f64;
    0.5f64.powf(elapsed / cfg.half_life_ms as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScore {
    pub user_id: String,
    pub window: Window,
    pub value: f64,
}

/// Weighted event sum over `window`.
pub fn outcome_score(
    stream: &EventStream,
    window: Window,
    table: &EventWeightTable,
    cfg: &DecayConfig,
) -> OutcomeScore {
    let value = stream
        .records_in(window)
        .iter()
        .map(|r| table.weight(&r.event_name) * temporal_weight(r.timestamp, cfg) * r.weight_value())
        .sum();
    OutcomeScore {
        user_id: stream.user_id().to_owned(),
        window,
        value,
    }
}
