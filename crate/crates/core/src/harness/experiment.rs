//! The decide → intervene → measure → update loop.
//!
//! Users are split into treatment and control once. Each cycle, every treated
//! user under its frequency cap gets a Thompson-sampled combination, matched to
//! a catalogue message; the simulator plays out the cycle for everybody; the
//! treated users' effects are estimated by Difference-in-Differences against
//! their nearest control-group users; rewards are folded into the posterior
//! store before the next cycle starts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, ContextMode, ExperimentConfig, MetricKind};
use super::lift::{matched_lift, LiftError, LiftReport, UserOutcome};
use crate::event_model::{EventError, EventStream, Millis, Window};
use crate::ite::{did_estimate, select_controls, InterventionRecord, IteError, IteEstimate, UserProfile};
use crate::outcome::{fit_event_weights, EventWeightTable, OutcomeError};
use crate::policy::{
    mean_posterior, thompson_select_with, update_posterior_with, ActionCombo, BetaPosterior, PolicyError,
    PosteriorEntry, PosteriorStore, PriorSource,
};
use crate::seed::SeedTree;
use crate::simulator::{generate_population, simulate_lifted, simulate_organic, LatentUser, SimError};
use crate::synthesis::{delivered_combo, eligible_templates, match_message, MessageCatalog};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Outcome(#[from] OutcomeError),
    #[error(transparent)]
    Ite(#[from] IteError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("all {0} cycles have already run")]
    Finished(usize),
    #[error("experiment has {0} cycles left to run")]
    Unfinished(usize),
}

const ASSIGN: u64 = 1;
const WARMUP: u64 = 2;
const CYCLE: u64 = 3;
const SELECT: u64 = 4;
const BOOTSTRAP: u64 = 5;

const SEG_ORGANIC: u64 = 0;
const SEG_EFFECT: u64 = 1;
const SEG_AFTER: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStatus {
    Sent,
    SkippedNoEligible,
    SkippedFrequencyCap,
}

/// One audit-log line per treated user per cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub cycle: usize,
    pub t_int: Millis,
    pub user_id: String,
    pub context: String,
    pub status: DecisionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<ActionCombo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delivered: Option<ActionCombo>,
}

/// One audit-log line per measured intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub cycle: usize,
    pub context: String,
    pub message_id: String,
    pub combo: ActionCombo,
    pub estimate: IteEstimate,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CycleOutput {
    pub decisions: Vec<DecisionRecord>,
    pub estimates: Vec<EstimateRecord>,
}

/// Mutable run state beyond the posterior store and event streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub next_cycle: usize,
    pub sends: BTreeMap<String, u32>,
}

/// Empirical-Bayes priors from a frozen copy of the store: the mean posterior
/// of the nearest treated users that have data for the action.
struct NeighbourPriors<'a> {
    frozen: &'a PosteriorStore,
    neighbours: &'a BTreeMap<String, Vec<String>>,
}

impl PriorSource for NeighbourPriors<'_> {
    fn prior(&self, context: &str, set: &str, label: &str) -> Option<BetaPosterior> {
        let near = self.neighbours.get(context)?;
        mean_posterior(
            near.iter()
                .filter_map(|n| self.frozen.entry(n, set, label).map(PosteriorEntry::posterior)),
        )
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    cfg: ExperimentConfig,
    seeds: SeedTree,
    catalog: MessageCatalog,
    population: Vec<LatentUser>,
    treated: Vec<bool>,
    contexts: Vec<String>,
    table: EventWeightTable,
    profiles: Vec<UserProfile>,
    /// Control-group indices per treated user, nearest first.
    controls: Vec<Vec<usize>>,
    eb_neighbours: BTreeMap<String, Vec<String>>,
    streams: Vec<EventStream>,
    store: PosteriorStore,
    progress: Progress,
}

impl Experiment {
    /// Validates the config, draws the population, assigns groups, simulates
    /// the warm-up period and fits the event weights on it.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        let mut exp = Self::setup(cfg)?;
        let warmup = Window::new(0, exp.cfg.start()).expect("validated warm-up");
        let seeds = exp.seeds;
        let cfg = &exp.cfg;
        exp.streams = exp
            .population
            .par_iter()
            .map(|u| simulate_organic(u, &cfg.sim, warmup, seeds.child(&[WARMUP, u.index])))
            .collect();
        exp.fit()?;
        Ok(exp)
    }

    /// Continues a run from its persisted posterior store, event log and progress.
    pub fn resume(
        cfg: ExperimentConfig,
        store: PosteriorStore,
        mut streams: BTreeMap<String, EventStream>,
        progress: Progress,
    ) -> Result<Self, HarnessError> {
        let mut exp = Self::setup(cfg)?;
        if store.space() != exp.catalog.space() {
            return Err(HarnessError::Resume(
                "posterior store action space differs from the catalogue".into(),
            ));
        }
        if progress.next_cycle > exp.cfg.n_cycles {
            return Err(HarnessError::Resume(format!(
                "checkpoint is at cycle {} of {}",
                progress.next_cycle, exp.cfg.n_cycles
            )));
        }
        exp.streams = exp
            .population
            .iter()
            .map(|u| {
                streams
                    .remove(&u.user_id)
                    .unwrap_or_else(|| EventStream::empty(u.user_id.clone()))
            })
            .collect();
        if let Some(id) = streams.keys().next() {
            return Err(HarnessError::Resume(format!("event log has unknown user {id:?}")));
        }
        exp.fit()?;
        exp.store = store;
        exp.progress = progress;
        Ok(exp)
    }

    fn setup(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let catalog = cfg.catalog()?;
        let seeds = cfg.sim.seeds();
        let population = generate_population(&cfg.sim, catalog.space())?;
        let n = population.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds.rng(&[ASSIGN]));
        let n_treated = (cfg.treatment_fraction * n as f64).round() as usize;
        let mut treated = vec![false; n];
        for &i in &order[..n_treated] {
            treated[i] = true;
        }
        let store = PosteriorStore::new(catalog.space().clone(), cfg.default_prior);
        Ok(Self {
            seeds,
            catalog,
            population,
            treated,
            contexts: Vec::new(),
            table: EventWeightTable::from_weights(BTreeMap::new(), cfg.smoothing, cfg.sim.goal.clone())?,
            profiles: Vec::new(),
            controls: Vec::new(),
            eb_neighbours: BTreeMap::new(),
            streams: Vec::new(),
            store,
            progress: Progress {
                next_cycle: 0,
                sends: BTreeMap::new(),
            },
            cfg,
        })
    }

    /// Everything derived from the warm-up history: weights, profiles,
    /// contexts, control sets and empirical-Bayes neighbourhoods.
    fn fit(&mut self) -> Result<(), HarnessError> {
        let start = self.cfg.start();
        let warmup = Window::new(0, start).expect("validated warm-up");
        let history: Vec<EventStream> = self
            .streams
            .iter()
            .map(|s| crate::event_model::slice_window(s, warmup))
            .collect();
        self.table = fit_event_weights(&history, &self.cfg.sim.goal, self.cfg.smoothing)?;

        let vocabulary: Vec<String> = {
            let mut v: BTreeSet<String> = self.cfg.sim.base_rates.keys().cloned().collect();
            v.extend(self.cfg.sim.goal.goal_events().iter().cloned());
            v.into_iter().collect()
        };
        let profile_window = Window::new((start - self.cfg.profile_window.millis()).max(0), start).expect("ordered");
        self.profiles = history
            .iter()
            .map(|s| UserProfile::from_stream(s, &vocabulary, profile_window))
            .collect();

        self.contexts = match self.cfg.context {
            ContextMode::User => self.population.iter().map(|u| u.user_id.clone()).collect(),
            ContextMode::Global => vec!["global".to_owned(); self.population.len()],
            ContextMode::ActivityTier => {
                let mut counts: Vec<usize> = history.iter().map(EventStream::len).collect();
                counts.sort_unstable();
                let median = counts.get(counts.len() / 2).copied().unwrap_or(0);
                history
                    .iter()
                    .map(|s| if s.len() >= median { "tier-high" } else { "tier-low" }.to_owned())
                    .collect()
            }
        };

        let control_profiles: Vec<UserProfile> = self.group(false).map(|i| self.profiles[i].clone()).collect();
        let treated_profiles: Vec<UserProfile> = self.group(true).map(|i| self.profiles[i].clone()).collect();
        let by_id: BTreeMap<&str, usize> = self
            .population
            .iter()
            .map(|u| (u.user_id.as_str(), u.index as usize))
            .collect();
        let k = self.cfg.did.k_controls();
        let treated: Vec<usize> = self.group(true).collect();
        let pick = |i: usize, pool: &[UserProfile]| -> Result<Vec<String>, IteError> {
            match select_controls(&self.profiles[i], pool, k, |_| true) {
                Ok(sel) => Ok(sel.user_ids),
                Err(IteError::NoControls) => Ok(Vec::new()),
                Err(e) => Err(e),
            }
        };
        let controls: Result<Vec<Vec<usize>>, IteError> = (0..self.population.len())
            .into_par_iter()
            .map(|i| {
                if !self.treated[i] {
                    return Ok(Vec::new());
                }
                let ids = pick(i, &control_profiles)?;
                Ok(ids.iter().map(|id| by_id[id.as_str()]).collect())
            })
            .collect();
        self.controls = controls?;
        self.eb_neighbours = if self.cfg.empirical_bayes && self.cfg.context == ContextMode::User {
            treated
                .par_iter()
                .map(|&i| Ok((self.population[i].user_id.clone(), pick(i, &treated_profiles)?)))
                .collect::<Result<_, IteError>>()?
        } else {
            BTreeMap::new()
        };
        Ok(())
    }

    fn group(&self, treated: bool) -> impl Iterator<Item = usize> + '_ {
        (0..self.population.len()).filter(move |&i| self.treated[i] == treated)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn population(&self) -> &[LatentUser] {
        &self.population
    }

    pub fn is_treated(&self, index: usize) -> bool {
        self.treated[index]
    }

    pub fn weights(&self) -> &EventWeightTable {
        &self.table
    }

    pub fn profiles(&self) -> &[UserProfile] {
        &self.profiles
    }

    pub fn streams(&self) -> &[EventStream] {
        &self.streams
    }

    pub fn store(&self) -> &PosteriorStore {
        &self.store
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.progress.next_cycle >= self.cfg.n_cycles
    }

    /// Posterior mean of an action for a user's context, falling back to the
    /// empirical-Bayes prior and then the default prior.
    pub fn posterior_mean(&self, user_index: usize, set: &str, label: &str) -> f64 {
        let priors = NeighbourPriors {
            frozen: &self.store,
            neighbours: &self.eb_neighbours,
        };
        self.store
            .resolve(&self.contexts[user_index], set, label, &priors)
            .mean()
    }

    pub fn cycle_start(&self, cycle: usize) -> Millis {
        self.cfg.start() + cycle as i64 * self.cfg.cycle_length.millis()
    }

    /// Runs the next decision cycle.
    pub fn run_cycle(&mut self) -> Result<CycleOutput, HarnessError> {
        if self.is_finished() {
            return Err(HarnessError::Finished(self.cfg.n_cycles));
        }
        let c = self.progress.next_cycle;
        let t_c = self.cycle_start(c);
        let t_next = self.cycle_start(c + 1);
        let seeds = self.seeds;

        // decide
        let frozen = self.store.clone();
        let priors = NeighbourPriors {
            frozen: &frozen,
            neighbours: &self.eb_neighbours,
        };
        let cap = self.cfg.frequency_cap;
        let decisions: Vec<DecisionRecord> = self
            .group(true)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|i| {
                let user = &self.population[i];
                let context = self.contexts[i].clone();
                let mut rec = DecisionRecord {
                    cycle: c,
                    t_int: t_c,
                    user_id: user.user_id.clone(),
                    context,
                    status: DecisionStatus::SkippedFrequencyCap,
                    selected: None,
                    message_id: None,
                    delivered: None,
                };
                let sent = self.progress.sends.get(&user.user_id).copied().unwrap_or(0);
                if cap.is_some_and(|cap| sent >= cap) {
                    return rec;
                }
                let mut rng = seeds.rng(&[SELECT, c as u64, user.index]);
                let combo = thompson_select_with(&frozen, &priors, &rec.context, &mut rng);
                let eligible = eligible_templates(&self.catalog, &user.tags);
                match match_message(&combo, &eligible) {
                    Ok(t) => {
                        rec.status = DecisionStatus::Sent;
                        rec.message_id = Some(t.message_id.clone());
                        rec.delivered = Some(delivered_combo(&combo, t));
                    }
                    Err(_) => rec.status = DecisionStatus::SkippedNoEligible,
                }
                rec.selected = Some(combo);
                rec
            })
            .collect();

        // intervene
        let delivered: BTreeMap<&str, &ActionCombo> = decisions
            .iter()
            .filter_map(|d| d.delivered.as_ref().map(|combo| (d.user_id.as_str(), combo)))
            .collect();
        let baseline = self
            .cfg
            .baseline
            .filter(|b| c.is_multiple_of(b.every_n_cycles))
            .map_or(1.0, |b| b.multiplier);
        let effect_end = t_c + self.cfg.sim.effect_duration.millis();
        let sim = &self.cfg.sim;
        let segments: Vec<EventStream> = self
            .population
            .par_iter()
            .map(|u| {
                let path = |seg| seeds.child(&[CYCLE, c as u64, u.index, seg]);
                let lift = delivered
                    .get(u.user_id.as_str())
                    .map(|combo| u.effective_multiplier(combo));
                if lift.is_none() && baseline == 1.0 {
                    return simulate_organic(u, sim, Window::new(t_c, t_next).expect("ordered"), path(SEG_ORGANIC));
                }
                let m = lift.unwrap_or(1.0) * baseline;
                let mut s = simulate_lifted(
                    u,
                    sim,
                    Window::new(t_c, effect_end).expect("ordered"),
                    m,
                    path(SEG_EFFECT),
                );
                let after = simulate_organic(
                    u,
                    sim,
                    Window::new(effect_end, t_next).expect("ordered"),
                    path(SEG_AFTER),
                );
                s.extend(after).expect("same user");
                s
            })
            .collect();
        for (stream, seg) in self.streams.iter_mut().zip(segments) {
            stream.extend(seg)?;
        }

        // measure
        let index_of: BTreeMap<&str, usize> = self
            .population
            .iter()
            .map(|u| (u.user_id.as_str(), u.index as usize))
            .collect();
        let estimates: Vec<Option<EstimateRecord>> = decisions
            .par_iter()
            .filter(|d| d.status == DecisionStatus::Sent)
            .map(|d| {
                let i = index_of[d.user_id.as_str()];
                let combo = d.delivered.clone().expect("sent decisions carry a combo");
                if self.controls[i].is_empty() {
                    return Ok(None);
                }
                let controls: Vec<&EventStream> = self.controls[i].iter().map(|&j| &self.streams[j]).collect();
                let record = InterventionRecord {
                    user_id: d.user_id.clone(),
                    t_int: t_c,
                    action_combo: combo.clone(),
                    context_key: d.context.clone(),
                };
                let estimate = did_estimate(&self.streams[i], &record, &controls, &self.table, &self.cfg.did)?;
                Ok(Some(EstimateRecord {
                    cycle: c,
                    context: d.context.clone(),
                    message_id: d.message_id.clone().expect("sent"),
                    combo,
                    estimate,
                }))
            })
            .collect::<Result<_, HarnessError>>()?;
        let estimates: Vec<EstimateRecord> = estimates.into_iter().flatten().collect();

        // update
        for d in decisions.iter().filter(|d| d.status == DecisionStatus::Sent) {
            *self.progress.sends.entry(d.user_id.clone()).or_insert(0) += 1;
        }
        for e in &estimates {
            update_posterior_with(&mut self.store, &priors, &e.context, &e.combo, e.estimate.reward_bit)?;
        }
        self.progress.next_cycle += 1;
        Ok(CycleOutput { decisions, estimates })
    }

    /// Per-user metric values over the experiment period.
    pub fn outcomes(&self) -> Vec<UserOutcome> {
        let period = Window::new(
            self.cfg.start(),
            self.cycle_start(self.progress.next_cycle).max(self.cfg.start() + 1),
        )
        .expect("ordered");
        (0..self.population.len())
            .map(|i| {
                let records = self.streams[i].records_in(period);
                let metrics = self
                    .cfg
                    .metrics
                    .iter()
                    .map(|m| {
                        let hits = records.iter().filter(|r| m.events.contains(&r.event_name));
                        let v = match m.kind {
                            MetricKind::Binary => f64::from(u8::from(hits.count() > 0)),
                            MetricKind::Count => hits.count() as f64,
                            MetricKind::Value => hits.map(|r| r.weight_value()).sum(),
                        };
                        (m.name.clone(), v)
                    })
                    .collect();
                UserOutcome {
                    profile: self.profiles[i].clone(),
                    treated: self.treated[i],
                    metrics,
                }
            })
            .collect()
    }

    pub fn lift_report(&self) -> Result<LiftReport, HarnessError> {
        if !self.is_finished() {
            return Err(HarnessError::Unfinished(self.cfg.n_cycles - self.progress.next_cycle));
        }
        report_from_outcomes(&self.cfg, &self.outcomes())
    }
}

/// Lift report for a finished run's outcomes, seeded from the config.
pub fn report_from_outcomes(cfg: &ExperimentConfig, outcomes: &[UserOutcome]) -> Result<LiftReport, HarnessError> {
    Ok(matched_lift(
        outcomes,
        &cfg.metrics,
        cfg.ci_level,
        cfg.bootstrap_resamples,
        cfg.sim.seeds().child(&[BOOTSTRAP]),
    )?)
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub report: LiftReport,
    pub decisions: Vec<DecisionRecord>,
    pub estimates: Vec<EstimateRecord>,
    pub experiment: Experiment,
}

/// Runs every cycle in memory.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let mut exp = Experiment::new(cfg)?;
    let mut decisions = Vec::new();
    let mut estimates = Vec::new();
    while !exp.is_finished() {
        let out = exp.run_cycle()?;
        decisions.extend(out.decisions);
        estimates.extend(out.estimates);
    }
    Ok(ExperimentResult {
        report: exp.lift_report()?,
        decisions,
        estimates,
        experiment: exp,
    })
}
