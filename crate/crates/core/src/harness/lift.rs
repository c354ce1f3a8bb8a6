//! Matched-pair lift with percentile bootstrap confidence intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{MetricKind, MetricSpec};
use crate::ite::{select_controls, IteError, UserProfile};
use crate::seed::SeedTree;

#[derive(Debug, Error, PartialEq)]
pub enum LiftError {
    #[error("the {0} group is empty")]
    EmptyGroup(&'static str),
    #[error("user {0:?} has no value for metric {1:?}")]
    MissingMetric(String, String),
    #[error("confidence level {0} not in (0, 1)")]
    InvalidLevel(f64),
    #[error("resample count must be positive")]
    NoResamples,
    #[error(transparent)]
    Matching(#[from] IteError),
}

/// One user's end-of-experiment metric values with the profile used for pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub profile: UserProfile,
    pub treated: bool,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLift {
    pub name: String,
    pub kind: MetricKind,
    /// Mean over matched treated users (a rate for binary metrics).
    pub treated_rate: f64,
    pub control_rate: f64,
    pub absolute_lift: f64,
    /// `absolute_lift / control_rate`; absent when the control rate is 0.
    pub relative_lift: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub relative_ci_low: Option<f64>,
    pub relative_ci_high: Option<f64>,
}

impl MetricLift {
    pub fn ci_excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }

    pub fn ci_covers(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftReport {
    pub level: f64,
    pub resamples: usize,
    pub pairs: usize,
    /// Treated users left without a control after the pool ran out.
    pub unmatched: usize,
    pub metrics: Vec<MetricLift>,
}

impl LiftReport {
    pub fn metric(&self, name: &str) -> Option<&MetricLift> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn render_table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("n/a".to_owned(), |v| format!("{:+.2}%", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} matched pairs, {} unmatched, {:.0}% bootstrap CI ({} resamples)",
            self.pairs,
            self.unmatched,
            100.0 * self.level,
            self.resamples
        );
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>10} {:>10} {:>22} {:>9} {:>20}",
            "metric", "treated", "control", "abs lift", "abs CI", "rel lift", "rel CI"
        );
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{:<16} {:>10.4} {:>10.4} {:>+10.4} {:>22} {:>9} {:>20}",
                m.name,
                m.treated_rate,
                m.control_rate,
                m.absolute_lift,
                format!("[{:+.4}, {:+.4}]", m.ci_low, m.ci_high),
                pct(m.relative_lift),
                format!("[{}, {}]", pct(m.relative_ci_low), pct(m.relative_ci_high)),
            );
        }
        out
    }
}

/// Greedy nearest-neighbour pairing without replacement, treated users in
/// input order. Returns `(treated index, control index)` pairs and the number
/// of treated users left unmatched.
pub fn pair_nearest(
    treated: &[&UserProfile],
    control: &[&UserProfile],
) -> Result<(Vec<(usize, usize)>, usize), IteError> {
    let pool: Vec<UserProfile> = control.iter().map(|p| (*p).clone()).collect();
    let index: BTreeMap<&str, usize> = pool.iter().enumerate().map(|(i, p)| (p.user_id.as_str(), i)).collect();
    let mut used = vec![false; pool.len()];
    let mut pairs = Vec::with_capacity(treated.len().min(pool.len()));
    let mut unmatched = 0;
    for (ti, t) in treated.iter().enumerate() {
        let pick = select_controls(t, &pool, 1, |c| !used[index[c.user_id.as_str()]]);
        match pick {
            Ok(sel) => {
                let ci = index[sel.user_ids[0].as_str()];
                used[ci] = true;
                pairs.push((ti, ci));
            }
            Err(IteError::NoControls) => unmatched += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, unmatched))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Pairs every treated user with its nearest control on pre-period profiles
/// and reports per-metric paired lift with percentile bootstrap CIs. All
/// metrics share the same resampled pair indices.
pub fn matched_lift(
    outcomes: &[UserOutcome],
    metrics: &[MetricSpec],
    level: f64,
    resamples: usize,
    seed: SeedTree,
) -> Result<LiftReport, LiftError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(LiftError::InvalidLevel(level));
    }
    if resamples == 0 {
        return Err(LiftError::NoResamples);
    }
    let treated: Vec<&UserOutcome> = outcomes.iter().filter(|o| o.treated).collect();
    let control: Vec<&UserOutcome> = outcomes.iter().filter(|o| !o.treated).collect();
    if treated.is_empty() {
        return Err(LiftError::EmptyGroup("treated"));
    }
    if control.is_empty() {
        return Err(LiftError::EmptyGroup("control"));
    }
    let tp: Vec<&UserProfile> = treated.iter().map(|o| &o.profile).collect();
    let cp: Vec<&UserProfile> = control.iter().map(|o| &o.profile).collect();
    let (pairs, unmatched) = pair_nearest(&tp, &cp)?;
    let n = pairs.len();

    let value = |o: &UserOutcome, name: &str| {
        o.metrics
            .get(name)
            .copied()
            .ok_or_else(|| LiftError::MissingMetric(o.profile.user_id.clone(), name.to_owned()))
    };
    // per metric: (treated values, control values) in pair order
    let mut columns = Vec::with_capacity(metrics.len());
    for m in metrics {
        let mut t = Vec::with_capacity(n);
        let mut c = Vec::with_capacity(n);
        for &(ti, ci) in &pairs {
            t.push(value(treated[ti], &m.name)?);
            c.push(value(control[ci], &m.name)?);
        }
        columns.push((t, c));
    }

    let mut rng = seed.rng(&[]);
    let mut boot: Vec<Vec<(f64, Option<f64>)>> = vec![Vec::with_capacity(resamples); metrics.len()];
    let mut idx = vec![0usize; n];
    for _ in 0..resamples {
        idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
        for (b, (t, c)) in boot.iter_mut().zip(&columns) {
            let (st, sc) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + t[i], b + c[i]));
            let diff = (st - sc) / n as f64;
            let rel = (sc != 0.0).then(|| (st - sc) / sc);
            b.push((diff, rel));
        }
    }

    let tail = (1.0 - level) / 2.0;
    let lifts = metrics
        .iter()
        .zip(columns)
        .zip(boot)
        .map(|((m, (t, c)), b)| {
            let treated_rate = t.iter().sum::<f64>() / n as f64;
            let control_rate = c.iter().sum::<f64>() / n as f64;
            let absolute_lift = treated_rate - control_rate;
            let mut diffs: Vec<f64> = b.iter().map(|x| x.0).collect();
            diffs.sort_by(f64::total_cmp);
            let rels: Option<Vec<f64>> = b.iter().map(|x| x.1).collect();
            let rel_ci = rels.map(|mut r| {
                r.sort_by(f64::total_cmp);
                (quantile(&r, tail), quantile(&r, 1.0 - tail))
            });
            MetricLift {
                name: m.name.clone(),
                kind: m.kind,
                treated_rate,
                control_rate,
                absolute_lift,
                relative_lift: (control_rate != 0.0).then(|| absolute_lift / control_rate),
                ci_low: quantile(&diffs, tail),
                ci_high: quantile(&diffs, 1.0 - tail),
                relative_ci_low: rel_ci.map(|r| r.0),
                relative_ci_high: rel_ci.map(|r| r.1),
            }
        })
        .collect();
    Ok(LiftReport {
        level,
        resamples,
        pairs: n,
        unmatched,
        metrics: lifts,
    })
}
