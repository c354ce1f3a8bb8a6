//! Synthetic users with known causal responses.
//!
//! Organic behaviour is an inhomogeneous Poisson process per event name with
//! a sinusoidal seasonal modulation. Precursor events spawn goal events with a
//! fixed probability after a short delay. An intervention multiplies the rate
//! of the lifted events over its effect window by the user's lift for the
//! delivered actions, gated by the user's responsiveness.
//!
//! Events are generated by thinning at a dominating rate of twice the
//! (lifted) base rate, drawing the same four uniforms for every candidate. The
//! candidate set therefore does not depend on the seasonal amplitude, which
//! couples runs that differ only in seasonality.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duration::Duration;
use crate::event_model::{EventRecord, EventStream, GoalSpec, Millis, Window, DAY};
use crate::policy::{ActionCombo, ActionSpace};
use crate::seed::{label, SeedTree};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

/// How per-user lift multipliers are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiftModel {
    /// Every action carries the same multiplier (1.0 is causally inert).
    Constant { multiplier: f64 },
    /// Each user responds to one uniformly drawn label of `set`.
    PreferredLabel { set: String, multiplier: f64 },
    /// Independent log-normal multipliers per action.
    LogNormal { sigma: f64 },
}

impl Default for LiftModel {
    fn default() -> Self {
        LiftModel::Constant { multiplier: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResponsivenessModel {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl Default for ResponsivenessModel {
    fn default() -> Self {
        ResponsivenessModel::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentShare {
    pub tag: String,
    /// Probability a user carries the tag.
    pub fraction: f64,
}

fn default_period() -> Duration {
    Duration::days(1)
}

fn default_goal_delay() -> Duration {
    Duration::hours(1)
}

fn default_effect() -> Duration {
    Duration::hours(12)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_users: usize,
    pub horizon: Duration,
    #[serde(default)]
    pub seed: u64,
    /// Organic events per day, per event name.
    pub base_rates: BTreeMap<String, f64>,
    #[serde(default)]
    pub seasonal_amplitude: f64,
    #[serde(default = "default_period")]
    pub seasonal_period: Duration,
    pub goal: GoalSpec,
    /// Probability that an occurrence of the event is followed by a goal.
    #[serde(default)]
    pub precursors: BTreeMap<String, f64>,
    /// Goals follow their precursor after a delay uniform in `[1ms, goal_delay_max]`.
    #[serde(default = "default_goal_delay")]
    pub goal_delay_max: Duration,
    /// Mean of the exponential order value attached to spawned goals.
    #[serde(default)]
    pub goal_value_mean: Option<f64>,
    /// Events whose rate an intervention multiplies; the precursors when absent.
    #[serde(default)]
    pub lifted_events: Option<BTreeSet<String>>,
    #[serde(default = "default_effect")]
    pub effect_duration: Duration,
    #[serde(default)]
    pub lift: LiftModel,
    #[serde(default)]
    pub responsiveness: ResponsivenessModel,
    /// Log-normal sigma of the per-user activity level (0 gives identical users).
    #[serde(default)]
    pub activity_spread: f64,
    #[serde(default)]
    pub segments: Vec<SegmentShare>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.horizon.millis() <= 0 {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        for (name, r) in &self.base_rates {
            if !(r.is_finite() && *r >= 0.0) {
                return bad(format!("base rate for {name:?} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.seasonal_amplitude) {
            return bad(format!("seasonal amplitude {} not in [0, 1)", self.seasonal_amplitude));
        }
        if self.seasonal_period.millis() <= 0 {
            return bad("seasonal period must be positive".into());
        }
        for (name, p) in &self.precursors {
            if !(0.0..=1.0).contains(p) {
                return bad(format!("goal probability for {name:?} not in [0, 1]"));
            }
        }
        if self.goal_delay_max.millis() < 1 {
            return bad("goal delay must be at least 1ms".into());
        }
        if let Some(v) = self.goal_value_mean {
            if !(v.is_finite() && v > 0.0) {
                return bad("goal value mean must be positive".into());
            }
        }
        if self.effect_duration.millis() <= 0 {
            return bad("effect duration must be positive".into());
        }
        match &self.lift {
            LiftModel::Constant { multiplier } | LiftModel::PreferredLabel { multiplier, .. } => {
                if !(multiplier.is_finite() && *multiplier >= 0.0) {
                    return bad(format!("lift multiplier {multiplier} must be finite and non-negative"));
                }
            }
            LiftModel::LogNormal { sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return bad("log-normal sigma must be non-negative".into());
                }
            }
        }
        match self.responsiveness {
            ResponsivenessModel::Constant { value } if !(0.0..=1.0).contains(&value) => {
                return bad("responsiveness must lie in [0, 1]".into());
            }
            ResponsivenessModel::Uniform { low, high } if !(0.0 <= low && low <= high && high <= 1.0) => {
                return bad("responsiveness bounds must satisfy 0 <= low <= high <= 1".into());
            }
            _ => {}
        }
        if !(self.activity_spread.is_finite() && self.activity_spread >= 0.0) {
            return bad("activity spread must be non-negative".into());
        }
        for s in &self.segments {
            if !(0.0..=1.0).contains(&s.fraction) {
                return bad(format!("segment {:?} fraction not in [0, 1]", s.tag));
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    pub fn is_lifted(&self, event: &str) -> bool {
        match &self.lifted_events {
            Some(set) => set.contains(event),
            None => self.precursors.contains_key(event),
        }
    }

    /// The goal event name emitted after precursors.
    pub fn conversion_event(&self) -> &str {
        self.goal.goal_events().iter().next().expect("goal spec is non-empty")
    }

    /// Seasonal factor `1 + A sin(2πt / period)`.
    pub fn seasonal_factor(&self, t: Millis) -> f64 {
        let phase = (t.rem_euclid(self.seasonal_period.millis())) as f64 / self.seasonal_period.millis() as f64;
        1.0 + self.seasonal_amplitude * (std::f64::consts::TAU * phase).sin()
    }
}

/// A synthetic user with a hidden response model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentUser {
    pub user_id: String,
    pub index: u64,
    /// Action set → label → rate multiplier when that action is delivered.
    pub preference: BTreeMap<String, BTreeMap<String, f64>>,
    pub responsiveness: f64,
    /// Scales every organic rate.
    pub activity: f64,
    pub tags: BTreeSet<String>,
}

impl LatentUser {
    pub fn lift_for(&self, set: &str, label: &str) -> f64 {
        self.preference
            .get(set)
            .and_then(|m| m.get(label))
            .copied()
            .unwrap_or(1.0)
    }

    /// Product of the lifts of the combination's actions.
    pub fn combo_lift(&self, combo: &ActionCombo) -> f64 {
        combo.choices.iter().map(|(s, l)| self.lift_for(s, l)).product()
    }

    /// `1 + responsiveness * (combo_lift - 1)`.
    pub fn effective_multiplier(&self, combo: &ActionCombo) -> f64 {
        1.0 + self.responsiveness * (self.combo_lift(combo) - 1.0)
    }

    /// Label of `set` with the largest lift, first on ties.
    pub fn preferred_label(&self, set: &str) -> Option<&str> {
        let labels = self.preference.get(set)?;
        let mut best: Option<(&str, f64)> = None;
        for (l, m) in labels {
            if best.is_none_or(|(_, b)| *m > b) {
                best = Some((l, *m));
            }
        }
        best.map(|(l, _)| l)
    }
}

pub fn user_id_for(index: u64) -> String {
    format!("u{index:06}")
}

const POPULATION: u64 = 1;
const EVENTS: u64 = 2;

/// Draws the population; a deterministic function of `cfg.seed`.
pub fn generate_population(cfg: &SimConfig, space: &ActionSpace) -> Result<Vec<LatentUser>, SimError> {
    cfg.validate()?;
    if let LiftModel::PreferredLabel { set, .. } = &cfg.lift {
        if space.set(set).is_none() {
            return Err(SimError::InvalidConfig(format!(
                "preferred-label set {set:?} is not an action set"
            )));
        }
    }
    let seeds = cfg.seeds();
    Ok((0..cfg.n_users as u64)
        .map(|index| {
            let mut rng = seeds.rng(&[POPULATION, index]);
            let mut preference = BTreeMap::new();
            let favourite = match &cfg.lift {
                LiftModel::PreferredLabel { set, .. } => {
                    let labels = &space.set(set).expect("checked").labels;
                    Some((set.as_str(), rng.random_range(0..labels.len())))
                }
                _ => None,
            };
            for set in space.sets() {
                let mut per_label = BTreeMap::new();
                for (li, l) in set.labels.iter().enumerate() {
                    let m = match &cfg.lift {
                        LiftModel::Constant { multiplier } => *multiplier,
                        LiftModel::PreferredLabel { multiplier, .. } => match favourite {
                            Some((s, f)) if s == set.name && f == li => *multiplier,
                            _ => 1.0,
                        },
                        LiftModel::LogNormal { sigma } => (sigma * rng.sample::<f64, _>(StandardNormal)).exp(),
                    };
                    per_label.insert(l.clone(), m);
                }
                preference.insert(set.name.clone(), per_label);
            }
            let responsiveness = match cfg.responsiveness {
                ResponsivenessModel::Constant { value } => value,
                ResponsivenessModel::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            };
            let activity = if cfg.activity_spread > 0.0 {
                // mean-one log-normal
                let s = cfg.activity_spread;
                (s * rng.sample::<f64, _>(StandardNormal) - 0.5 * s * s).exp()
            } else {
                1.0
            };
            let tags = cfg
                .segments
                .iter()
                .filter(|seg| rng.random::<f64>() < seg.fraction)
                .map(|seg| seg.tag.clone())
                .collect();
            LatentUser {
                user_id: user_id_for(index),
                index,
                preference,
                responsiveness,
                activity,
                tags,
            }
        })
        .collect())
}

/// Events in `window` (clipped to the horizon), with `lift` multiplying the
/// rate of lifted events. Spawned goals may fall after the window end.
fn simulate_segment(user: &LatentUser, cfg: &SimConfig, window: Window, lift: f64, seed: SeedTree) -> Vec<EventRecord> {
    let start = window.start().max(0);
    let end = window.end().min(cfg.horizon.millis());
    let mut out = Vec::new();
    if start >= end {
        return out;
    }
    let goal_name = cfg.conversion_event();
    let delay_span = (cfg.goal_delay_max.millis() - 1) as f64;
    for (name, per_day) in &cfg.base_rates {
        let m = if cfg.is_lifted(name) { lift } else { 1.0 };
        let rate = per_day * user.activity * m / DAY as f64;
        if rate <= 0.0 {
            continue;
        }
        let goal_p = cfg.precursors.get(name).copied().unwrap_or(0.0);
        let dominating = 2.0 * rate;
        let mut rng = seed.rng(&[label(name)]);
        let mut t = start as f64;
        loop {
            let gap: f64 = -(1.0 - rng.random::<f64>()).ln() / dominating;
            t += gap;
            if t >= end as f64 {
                break;
            }
            let (u_accept, u_goal, u_delay, u_value): (f64, f64, f64, f64) =
                (rng.random(), rng.random(), rng.random(), rng.random());
            let ts = t.floor() as Millis;
            if u_accept >= cfg.seasonal_factor(ts) / 2.0 {
                continue;
            }
            out.push(EventRecord::new(user.user_id.clone(), ts, name.clone()));
            if u_goal < goal_p {
                let g_ts = ts + 1 + (u_delay * delay_span).floor() as Millis;
                if g_ts < cfg.horizon.millis() {
                    let mut rec = EventRecord::new(user.user_id.clone(), g_ts, goal_name);
                    if let Some(mean) = cfg.goal_value_mean {
                        rec.value = Some(-mean * (1.0 - u_value).ln());
                    }
                    out.push(rec);
                }
            }
        }
    }
    out.sort_by_key(|r| r.timestamp);
    out
}

fn into_stream(user: &LatentUser, records: Vec<EventRecord>) -> EventStream {
    EventStream::new(user.user_id.clone(), records).expect("simulated records are valid and belong to the user")
}

/// Behaviour over `window` with the rate of lifted events multiplied by `lift`.
pub fn simulate_lifted(user: &LatentUser, cfg: &SimConfig, window: Window, lift: f64, seed: SeedTree) -> EventStream {
    into_stream(user, simulate_segment(user, cfg, window, lift, seed.child(&[EVENTS])))
}

/// Organic behaviour of `user` over `window`.
pub fn simulate_organic(user: &LatentUser, cfg: &SimConfig, window: Window, seed: SeedTree) -> EventStream {
    simulate_lifted(user, cfg, window, 1.0, seed)
}

/// Behaviour over the effect window `[t_int, t_int + effect_duration)` when
/// `combo` is delivered at `t_int`. Replaces the organic segment for that window.
pub fn apply_intervention(
    user: &LatentUser,
    combo: &ActionCombo,
    t_int: Millis,
    cfg: &SimConfig,
    seed: SeedTree,
) -> EventStream {
    let window = Window::new(t_int, t_int + cfg.effect_duration.millis()).expect("positive effect duration");
    simulate_lifted(user, cfg, window, user.effective_multiplier(combo), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_model::HOUR;

    fn space() -> ActionSpace {
        ActionSpace::from_pairs(&[
            ("tone", &["warm", "urgent", "playful"]),
            ("channel", &["push", "inapp"]),
        ])
        .unwrap()
    }

    fn cfg() -> SimConfig {
        SimConfig {
            n_users: 20,
            horizon: Duration::days(400),
            seed: 11,
            base_rates: [("open".to_string(), 5.0), ("view".to_string(), 3.0)].into(),
            seasonal_amplitude: 0.0,
            seasonal_period: Duration::days(1),
            goal: GoalSpec::new(["buy"], 2 * HOUR).unwrap(),
            precursors: [("view".to_string(), 0.1)].into(),
            goal_delay_max: Duration::hours(1),
            goal_value_mean: Some(30.0),
            lifted_events: None,
            effect_duration: Duration::hours(12),
            lift: LiftModel::PreferredLabel {
                set: "tone".into(),
                multiplier: 2.0,
            },
            responsiveness: ResponsivenessModel::Constant { value: 1.0 },
            activity_spread: 0.3,
            segments: vec![SegmentShare {
                tag: "premium".into(),
                fraction: 0.5,
            }],
        }
    }

    #[test]
    fn population_is_deterministic() {
        let a = generate_population(&cfg(), &space()).unwrap();
        let b = generate_population(&cfg(), &space()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let other = generate_population(&SimConfig { seed: 12, ..cfg() }, &space()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn empty_population() {
        assert!(generate_population(&SimConfig { n_users: 0, ..cfg() }, &space())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn preferred_label_model() {
        for u in generate_population(&cfg(), &space()).unwrap() {
            let tone = &u.preference["tone"];
            assert_eq!(tone.values().filter(|m| **m == 2.0).count(), 1);
            assert!(u.preference["channel"].values().all(|m| *m == 1.0));
            let fav = u.preferred_label("tone").unwrap();
            assert_eq!(u.lift_for("tone", fav), 2.0);
        }
    }

    #[test]
    fn inert_population() {
        let c = SimConfig {
            lift: LiftModel::Constant { multiplier: 1.0 },
            ..cfg()
        };
        for u in generate_population(&c, &space()).unwrap() {
            for combo in space().combinations() {
                assert_eq!(u.effective_multiplier(&combo), 1.0);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig {
            seasonal_amplitude: 1.0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(SimConfig {
            horizon: Duration(0),
            ..cfg()
        }
        .validate()
        .is_err());
        let mut c = cfg();
        c.base_rates.insert("x".into(), -1.0);
        assert!(c.validate().is_err());
        let c = SimConfig {
            lift: LiftModel::PreferredLabel {
                set: "nope".into(),
                multiplier: 2.0,
            },
            ..cfg()
        };
        assert!(generate_population(&c, &space()).is_err());
    }

    #[test]
    fn homogeneous_rate_within_three_sigma() {
        let c = SimConfig {
            activity_spread: 0.0,
            ..cfg()
        };
        let user = &generate_population(&c, &space()).unwrap()[0];
        let w = Window::new(0, 365 * DAY).unwrap();
        let s = simulate_organic(user, &c, w, SeedTree::new(5));
        let opens = s.records().iter().filter(|r| r.event_name == "open").count() as f64;
        let expected = 5.0 * 365.0;
        assert!(
            (opens - expected).abs() < 3.0 * expected.sqrt(),
            "{opens} vs {expected}"
        );
    }

    #[test]
    fn zero_rates_give_empty_stream() {
        let mut c = cfg();
        c.base_rates.values_mut().for_each(|r| *r = 0.0);
        let user = &generate_population(&c, &space()).unwrap()[0];
        assert!(simulate_organic(user, &c, Window::new(0, 30 * DAY).unwrap(), SeedTree::new(1)).is_empty());
    }

    #[test]
    fn organic_is_deterministic_and_in_window() {
        let c = cfg();
        let user = &generate_population(&c, &space()).unwrap()[3];
        let w = Window::new(DAY, 3 * DAY).unwrap();
        let a = simulate_organic(user, &c, w, SeedTree::new(8));
        assert_eq!(a, simulate_organic(user, &c, w, SeedTree::new(8)));
        assert!(a
            .records()
            .iter()
            .filter(|r| r.event_name != "buy")
            .all(|r| w.contains(r.timestamp)));
        for r in a.records().iter().filter(|r| r.event_name == "buy") {
            assert!(r.timestamp > w.start() && r.timestamp < w.end() + HOUR);
            assert!(r.value.unwrap() >= 0.0);
        }
    }

    #[test]
    fn null_combo_matches_organic_exactly() {
        // All multipliers 1 → the same draws as organic.
        let c = SimConfig {
            lift: LiftModel::Constant { multiplier: 1.0 },
            ..cfg()
        };
        let user = &generate_population(&c, &space()).unwrap()[0];
        let combo = space().combinations()[0].clone();
        let seg = apply_intervention(user, &combo, 10 * DAY, &c, SeedTree::new(3));
        let w = Window::new(10 * DAY, 10 * DAY + 12 * HOUR).unwrap();
        assert_eq!(seg, simulate_organic(user, &c, w, SeedTree::new(3)));
    }

    #[test]
    fn unresponsive_user_ignores_combo() {
        let c = SimConfig {
            responsiveness: ResponsivenessModel::Constant { value: 0.0 },
            ..cfg()
        };
        let user = &generate_population(&c, &space()).unwrap()[0];
        let w = Window::new(10 * DAY, 10 * DAY + 12 * HOUR).unwrap();
        for combo in space().combinations() {
            assert_eq!(
                apply_intervention(user, &combo, 10 * DAY, &c, SeedTree::new(4)),
                simulate_organic(user, &c, w, SeedTree::new(4))
            );
        }
    }

    #[test]
    fn doubling_multiplier_doubles_mean_count() {
        let c = SimConfig {
            lift: LiftModel::Constant { multiplier: 1.0 },
            activity_spread: 0.0,
            seasonal_amplitude: 0.3,
            ..cfg()
        };
        let mut user = generate_population(&c, &space()).unwrap()[0].clone();
        let combo = ActionCombo::from_pairs(&[("tone", "warm"), ("channel", "push")]);
        let count = |user: &LatentUser| -> f64 {
            (0..1000u64)
                .map(|rep| {
                    let s = apply_intervention(user, &combo, 50 * DAY, &c, SeedTree::new(rep));
                    s.records().iter().filter(|r| r.event_name == "view").count() as f64
                })
                .sum::<f64>()
                / 1000.0
        };
        let base = count(&user);
        user.preference.get_mut("tone").unwrap().insert("warm".into(), 2.0);
        let lifted = count(&user);
        // 1.5 views per 12h on average; the window covers the rising half of the
        // seasonal cycle, whose mean factor is 1 + 0.3 * 2/π.
        let expected = 1.5 * (1.0 + 0.3 * 2.0 / std::f64::consts::PI);
        assert!(
            (base - expected).abs() < 4.0 * (expected / 1000.0).sqrt(),
            "{base} vs {expected}"
        );
        let expected = 2.0 * expected;
        assert!(
            (lifted - expected).abs() < 4.0 * (expected / 1000.0).sqrt(),
            "{lifted} vs {expected}"
        );
        // open is not lifted
        let opens = |user: &LatentUser| {
            (0..200u64)
                .map(|rep| {
                    apply_intervention(user, &combo, 50 * DAY, &c, SeedTree::new(rep))
                        .records()
                        .iter()
                        .filter(|r| r.event_name == "open")
                        .count()
                })
                .sum::<usize>()
        };
        let mut plain = user.clone();
        plain.preference.get_mut("tone").unwrap().insert("warm".into(), 1.0);
        assert_eq!(opens(&user), opens(&plain));
    }

    #[test]
    fn seasonal_factor_shape() {
        let c = SimConfig {
            seasonal_amplitude: 0.5,
            ..cfg()
        };
        assert!((c.seasonal_factor(0) - 1.0).abs() < 1e-12);
        assert!((c.seasonal_factor(6 * HOUR) - 1.5).abs() < 1e-12);
        assert!((c.seasonal_factor(18 * HOUR) - 0.5).abs() < 1e-12);
        assert!((c.seasonal_factor(DAY + 6 * HOUR) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn config_parses_from_toml() {
        let doc = r#"
            n_users = 10
            horizon = "30d"
            base_rates = { open = 4.0, view = 2.0 }
            seasonal_amplitude = 0.25
            goal = { goal_events = ["buy"], attribution_window_ms = 7200000 }
            precursors = { view = 0.05 }
            lift = { kind = "preferred_label", set = "tone", multiplier = 2.0 }
        "#;
        let c: SimConfig = toml::from_str(doc).unwrap();
        c.validate().unwrap();
        assert_eq!(c.horizon, Duration::days(30));
        assert_eq!(c.effect_duration, Duration::hours(12));
        assert!(c.is_lifted("view") && !c.is_lifted("open"));
    }
}
