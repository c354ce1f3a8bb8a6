//! Per-user Beta-Bernoulli posteriors over a modular action space, and
//! Thompson sampling over them.
//!
//! The action space is a list of independent action sets (tone, timing slot,
//! channel, ...). Selection draws one Beta sample per label in every set and
//! keeps the argmax of each set; a reward bit for the resulting combination
//! updates the posterior of every constituent action.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ite::UserProfile;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("action space has no action sets")]
    EmptySpace,
    #[error("duplicate action set {0:?}")]
    DuplicateSet(String),
    #[error("action set {0:?} has no labels")]
    EmptySet(String),
    #[error("duplicate label {1:?} in action set {0:?}")]
    DuplicateLabel(String, String),
    #[error("combination does not match the action space: {0}")]
    InconsistentCombo(String),
    #[error("Beta parameters must be positive and finite, got ({0}, {1})")]
    InvalidBeta(f64, f64),
    #[error("reward must be 0 or 1, got {0}")]
    InvalidReward(u8),
    #[error("snapshot format {found:?} is not {expected:?}")]
    FormatMismatch { found: String, expected: String },
    #[error("snapshot entry {0} is inconsistent with the action space")]
    UnknownEntry(String),
    #[error("duplicate snapshot entry {0}")]
    DuplicateEntry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSet {
    pub name: String,
    pub labels: Vec<String>,
}

/// Operator-defined action sets, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct ActionSpace {
    sets: Vec<ActionSet>,
}

#[derive(Deserialize)]
struct RawSpace {
    sets: Vec<ActionSet>,
}

impl TryFrom<RawSpace> for ActionSpace {
    type Error = PolicyError;
    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        ActionSpace::new(raw.sets)
    }
}

impl ActionSpace {
    pub fn new(sets: Vec<ActionSet>) -> Result<Self, PolicyError> {
        if sets.is_empty() {
            return Err(PolicyError::EmptySpace);
        }
        let mut names = BTreeSet::new();
        for set in &sets {
            if !names.insert(set.name.as_str()) {
                return Err(PolicyError::DuplicateSet(set.name.clone()));
            }
            if set.labels.is_empty() {
                return Err(PolicyError::EmptySet(set.name.clone()));
            }
            let mut labels = BTreeSet::new();
            for l in &set.labels {
                if !labels.insert(l.as_str()) {
                    return Err(PolicyError::DuplicateLabel(set.name.clone(), l.clone()));
                }
            }
        }
        Ok(Self { sets })
    }

    /// Convenience constructor from `(name, labels)` pairs.
    pub fn from_pairs(pairs: &[(&str, &[&str])]) -> Result<Self, PolicyError> {
        Self::new(
            pairs
                .iter()
                .map(|(n, ls)| ActionSet {
                    name: n.to_string(),
                    labels: ls.iter().map(|l| l.to_string()).collect(),
                })
                .collect(),
        )
    }

    pub fn sets(&self) -> &[ActionSet] {
        &self.sets
    }

    pub fn set(&self, name: &str) -> Option<&ActionSet> {
        self.sets.iter().find(|s| s.name == name)
    }

    pub fn has_action(&self, set: &str, label: &str) -> bool {
        self.set(set).is_some_and(|s| s.labels.iter().any(|l| l == label))
    }

    /// Number of distinct combinations.
    pub fn combination_count(&self) -> usize {
        self.sets.iter().map(|s| s.labels.len()).product()
    }

    /// Every combination, in lexicographic order of declared label indices.
    pub fn combinations(&self) -> Vec<ActionCombo> {
        let mut out = vec![ActionCombo::default()];
        for set in &self.sets {
            out = out
                .into_iter()
                .flat_map(|c| {
                    set.labels.iter().map(move |l| {
                        let mut c = c.clone();
                        c.choices.insert(set.name.clone(), l.clone());
                        c
                    })
                })
                .collect();
        }
        out
    }

    pub fn check_combo(&self, combo: &ActionCombo) -> Result<(), PolicyError> {
        if combo.choices.len() != self.sets.len() {
            return Err(PolicyError::InconsistentCombo(format!(
                "{} choices for {} action sets",
                combo.choices.len(),
                self.sets.len()
            )));
        }
        for (set, label) in &combo.choices {
            if !self.has_action(set, label) {
                return Err(PolicyError::InconsistentCombo(format!("unknown action {set}={label}")));
            }
        }
        Ok(())
    }
}

/// One chosen label per action set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionCombo {
    pub choices: BTreeMap<String, String>,
}

impl ActionCombo {
    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Self {
            choices: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn get(&self, set: &str) -> Option<&str> {
        self.choices.get(set).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBeta")]
pub struct BetaPosterior {
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawBeta {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawBeta> for BetaPosterior {
    type Error = PolicyError;
    fn try_from(raw: RawBeta) -> Result<Self, Self::Error> {
        BetaPosterior::new(raw.alpha, raw.beta)
    }
}

impl BetaPosterior {
    pub const UNIFORM: BetaPosterior = BetaPosterior { alpha: 1.0, beta: 1.0 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self, PolicyError> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
            return Err(PolicyError::InvalidBeta(alpha, beta));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Conjugate update with one Bernoulli observation.
    pub fn observe(&mut self, reward_bit: u8) {
        let r = f64::from(reward_bit);
        self.alpha += r;
        self.beta += 1.0 - r;
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Beta::new(self.alpha, self.beta)
            .expect("parameters validated on construction")
            .sample(rng)
    }
}

impl Default for BetaPosterior {
    fn default() -> Self {
        Self::UNIFORM
    }
}

/// Posterior of one (context, set, label) and the prior it started from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorEntry {
    pub prior: BetaPosterior,
    pub successes: u64,
    pub failures: u64,
}

impl PosteriorEntry {
    pub fn new(prior: BetaPosterior) -> Self {
        Self {
            prior,
            successes: 0,
            failures: 0,
        }
    }

    /// `Beta(prior.alpha + successes, prior.beta + failures)`.
    pub fn posterior(&self) -> BetaPosterior {
        BetaPosterior {
            alpha: self.prior.alpha + self.successes as f64,
            beta: self.prior.beta + self.failures as f64,
        }
    }

    pub fn observe(&mut self, reward_bit: u8) {
        if reward_bit == 1 {
            self.successes += 1;
        } else {
            self.failures += 1;
        }
    }

    /// Number of rewards folded into this entry.
    pub fn update_count(&self) -> u64 {
        self.successes + self.failures
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryKey {
    pub context: String,
    pub set: String,
    pub label: String,
}

impl EntryKey {
    pub fn new(context: &str, set: &str, label: &str) -> Self {
        Self {
            context: context.to_owned(),
            set: set.to_owned(),
            label: label.to_owned(),
        }
    }
}

impl std::fmt::Display for EntryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}={})", self.context, self.set, self.label)
    }
}

/// Fallback prior for entries with no data of their own.
pub trait PriorSource {
    fn prior(&self, context: &str, set: &str, label: &str) -> Option<BetaPosterior>;
}

/// No imputation; the store's default prior applies.
pub struct NoImputation;

impl PriorSource for NoImputation {
    fn prior(&self, _: &str, _: &str, _: &str) -> Option<BetaPosterior> {
        None
    }
}

/// The agent's learned state.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStore {
    space: ActionSpace,
    default_prior: BetaPosterior,
    entries: BTreeMap<EntryKey, PosteriorEntry>,
}

pub const SNAPSHOT_FORMAT: &str = "cadence.posterior-store.v1";

#[derive(Serialize, Deserialize)]
struct SnapshotEntry {
    context: String,
    set: String,
    label: String,
    prior_alpha: f64,
    prior_beta: f64,
    successes: u64,
    failures: u64,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    space: ActionSpace,
    default_prior: BetaPosterior,
    entries: Vec<SnapshotEntry>,
}

impl PosteriorStore {
    pub fn new(space: ActionSpace, default_prior: BetaPosterior) -> Self {
        Self {
            space,
            default_prior,
            entries: BTreeMap::new(),
        }
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn default_prior(&self) -> BetaPosterior {
        self.default_prior
    }

    pub fn entries(&self) -> &BTreeMap<EntryKey, PosteriorEntry> {
        &self.entries
    }

    pub fn entry(&self, context: &str, set: &str, label: &str) -> Option<&PosteriorEntry> {
        self.entries.get(&EntryKey::new(context, set, label))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Posterior of an action: the stored entry, else the imputed prior, else
    /// the default prior.
    pub fn resolve(&self, context: &str, set: &str, label: &str, priors: &dyn PriorSource) -> BetaPosterior {
        match self.entry(context, set, label) {
            Some(e) => e.posterior(),
            None => priors.prior(context, set, label).unwrap_or(self.default_prior),
        }
    }

    /// Inserts an entry directly (used by snapshot loading and tests).
    pub fn insert(&mut self, key: EntryKey, entry: PosteriorEntry) -> Result<(), PolicyError> {
        if !self.space.has_action(&key.set, &key.label) {
            return Err(PolicyError::UnknownEntry(key.to_string()));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.to_owned(),
            space: self.space.clone(),
            default_prior: self.default_prior,
            entries: self
                .entries
                .iter()
                .map(|(k, e)| SnapshotEntry {
                    context: k.context.clone(),
                    set: k.set.clone(),
                    label: k.label.clone(),
                    prior_alpha: e.prior.alpha,
                    prior_beta: e.prior.beta,
                    successes: e.successes,
                    failures: e.failures,
                })
                .collect(),
        };
        serde_json::to_string(&snap).expect("snapshot serialises")
    }

    /// Parses a snapshot; any inconsistency is an error.
    pub fn from_json(s: &str) -> Result<Self, SnapshotError> {
        let snap: Snapshot = serde_json::from_str(s)?;
        if snap.format != SNAPSHOT_FORMAT {
            return Err(PolicyError::FormatMismatch {
                found: snap.format,
                expected: SNAPSHOT_FORMAT.to_owned(),
            }
            .into());
        }
        let mut store = PosteriorStore::new(snap.space, snap.default_prior);
        for e in snap.entries {
            let key = EntryKey {
                context: e.context,
                set: e.set,
                label: e.label,
            };
            let entry = PosteriorEntry {
                prior: BetaPosterior::new(e.prior_alpha, e.prior_beta)?,
                successes: e.successes,
                failures: e.failures,
            };
            if store.entries.contains_key(&key) {
                return Err(PolicyError::DuplicateEntry(key.to_string()).into());
            }
            store.insert(key, entry)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] PolicyError),
}

/// Index of the maximum; the first one on ties.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Draws one posterior sample per label of every action set, in declaration
/// order.
pub fn sample_actions<R: Rng + ?Sized>(
    store: &PosteriorStore,
    priors: &dyn PriorSource,
    context: &str,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    store
        .space
        .sets
        .iter()
        .map(|set| {
            set.labels
                .iter()
                .map(|label| store.resolve(context, &set.name, label, priors).sample(rng))
                .collect()
        })
        .collect()
}

/// Assembles the per-set argmax of `draws` into a combination.
pub fn combo_from_draws(space: &ActionSpace, draws: &[Vec<f64>]) -> ActionCombo {
    let choices = space
        .sets
        .iter()
        .zip(draws)
        .map(|(set, d)| {
            let best = argmax_first(d).expect("action sets are non-empty");
            (set.name.clone(), set.labels[best].clone())
        })
        .collect();
    ActionCombo { choices }
}

/// Thompson sampling with the store's default prior for unseen actions.
pub fn thompson_select<R: Rng + ?Sized>(store: &PosteriorStore, context: &str, rng: &mut R) -> ActionCombo {
    thompson_select_with(store, &NoImputation, context, rng)
}

/// Thompson sampling with imputed priors for unseen actions.
pub fn thompson_select_with<R: Rng + ?Sized>(
    store: &PosteriorStore,
    priors: &dyn PriorSource,
    context: &str,
    rng: &mut R,
) -> ActionCombo {
    let draws = sample_actions(store, priors, context, rng);
    combo_from_draws(&store.space, &draws)
}

/// Credits `reward_bit` to every action in `combo`.
pub fn update_posterior(
    store: &mut PosteriorStore,
    context: &str,
    combo: &ActionCombo,
    reward_bit: u8,
) -> Result<(), PolicyError> {
    update_posterior_with(store, &NoImputation, context, combo, reward_bit)
}

/// As [`update_posterior`]; entries created by this update start from the
/// imputed prior.
pub fn update_posterior_with(
    store: &mut PosteriorStore,
    priors: &dyn PriorSource,
    context: &str,
    combo: &ActionCombo,
    reward_bit: u8,
) -> Result<(), PolicyError> {
    if reward_bit > 1 {
        return Err(PolicyError::InvalidReward(reward_bit));
    }
    store.space.check_combo(combo)?;
    for (set, label) in &combo.choices {
        let key = EntryKey::new(context, set, label);
        let start = store.resolve(context, set, label, priors);
        store
            .entries
            .entry(key)
            .or_insert(PosteriorEntry::new(start))
            .observe(reward_bit);
    }
    Ok(())
}

/// Component-wise mean of posteriors, `None` for an empty input.
pub fn mean_posterior<I: IntoIterator<Item = BetaPosterior>>(posteriors: I) -> Option<BetaPosterior> {
    let (mut a, mut b, mut n) = (0.0, 0.0, 0usize);
    for p in posteriors {
        a += p.alpha;
        b += p.beta;
        n += 1;
    }
    (n > 0).then(|| BetaPosterior {
        alpha: a / n as f64,
        beta: b / n as f64,
    })
}

/// Empirical-Bayes prior: among the `k` users nearest to `target`, the mean of
/// the posteriors of those that have data for the action; `default` if none do.
pub fn empirical_bayes_prior(
    target: &UserProfile,
    neighbours: &[(&UserProfile, Option<BetaPosterior>)],
    k: usize,
    default: BetaPosterior,
) -> BetaPosterior {
    let mut ranked: Vec<(f64, &str, Option<BetaPosterior>)> = neighbours
        .iter()
        .filter(|(p, _)| p.user_id != target.user_id)
        .map(|(p, post)| (target.distance_sq(p), p.user_id.as_str(), *post))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    mean_posterior(ranked.into_iter().take(k).filter_map(|(_, _, p)| p)).unwrap_or(default)
}
