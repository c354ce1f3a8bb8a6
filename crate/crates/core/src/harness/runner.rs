//! On-disk runs: audit logs, checkpoints and reports in one directory.
//!
//! Layout of a run directory:
//!
//! | file | contents |
//! |------|----------|
//! | `config.json` | resolved config (catalogue inlined, seed applied) |
//! | `decisions.jsonl` | one [`DecisionRecord`] per treated user per cycle |
//! | `estimates.jsonl` | one [`EstimateRecord`] per measured intervention |
//! | `state.json` | posterior store snapshot |
//! | `events.jsonl` | every simulated event so far |
//! | `progress.json` | next cycle, send counts and audit log lengths |
//! | `weights.json` | fitted event weights |
//! | `outcomes.jsonl` | per-user metric values (finished runs) |
//! | `report.json`, `report.txt` | lift report (finished runs) |

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ExperimentConfig;
use super::experiment::{report_from_outcomes, Experiment, HarnessError, Progress};
use super::lift::{LiftReport, UserOutcome};
use super::state::{restore_state, snapshot_state, write_atomic, StateError};
use crate::event_model::{ingest_events, write_streams, EventError};

pub const CONFIG_FILE: &str = "config.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const ESTIMATES_FILE: &str = "estimates.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const PROGRESS_FILE: &str = "progress.json";
pub const WEIGHTS_FILE: &str = "weights.json";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Events { path: PathBuf, source: EventError },
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop and checkpoint once this many cycles have run in total.
    pub stop_after: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Paused { next_cycle: usize },
    Finished(LiftReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    #[serde(flatten)]
    progress: Progress,
    decisions_len: u64,
    estimates_len: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_owned(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| RunError::Json {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn append_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<u64, RunError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r).expect("serialisable");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    let file = w.into_inner().map_err(|e| io_err(path)(e.into_error()))?;
    file.sync_all().map_err(io_err(path))?;
    Ok(file.metadata().map_err(io_err(path))?.len())
}

fn truncate_to(path: &Path, len: u64) -> Result<(), RunError> {
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(path)
        .map_err(io_err(path))?;
    let actual = file.metadata().map_err(io_err(path))?.len();
    if actual < len {
        return Err(RunError::Mismatch(format!(
            "{} is shorter than the checkpoint records ({actual} < {len} bytes)",
            path.display()
        )));
    }
    file.set_len(len).map_err(io_err(path))
}

fn write_checkpoint(exp: &Experiment, dir: &Path, decisions_len: u64, estimates_len: u64) -> Result<(), RunError> {
    snapshot_state(exp.store(), &dir.join(STATE_FILE))?;
    let events = dir.join(EVENTS_FILE);
    let mut buf = Vec::new();
    write_streams(&mut buf, exp.streams()).map_err(io_err(&events))?;
    write_atomic(&events, &buf).map_err(io_err(&events))?;
    write_json(
        &dir.join(PROGRESS_FILE),
        &Checkpoint {
            progress: exp.progress().clone(),
            decisions_len,
            estimates_len,
        },
    )
}

fn load_checkpoint(cfg: ExperimentConfig, dir: &Path) -> Result<(Experiment, Checkpoint), RunError> {
    let saved: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    if saved != cfg {
        return Err(RunError::Mismatch(format!(
            "config differs from the one recorded in {}",
            dir.join(CONFIG_FILE).display()
        )));
    }
    let checkpoint: Checkpoint = read_json(&dir.join(PROGRESS_FILE))?;
    let store = restore_state(&dir.join(STATE_FILE))?;
    let events = dir.join(EVENTS_FILE);
    let file = File::open(&events).map_err(io_err(&events))?;
    let ingested = ingest_events(BufReader::new(file)).map_err(|source| RunError::Events {
        path: events.clone(),
        source,
    })?;
    if let Some(bad) = ingested.report.rejected.first() {
        return Err(RunError::Mismatch(format!(
            "{} line {}: {}",
            events.display(),
            bad.line,
            bad.reason
        )));
    }
    let exp = Experiment::resume(cfg, store, ingested.streams, checkpoint.progress.clone())?;
    Ok((exp, checkpoint))
}

/// Runs (or resumes) an experiment whose artefacts live in `dir`.
pub fn run_to_dir(cfg: ExperimentConfig, dir: &Path, opts: RunOptions) -> Result<RunStatus, RunError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let decisions_path = dir.join(DECISIONS_FILE);
    let estimates_path = dir.join(ESTIMATES_FILE);
    let (mut exp, mut decisions_len, mut estimates_len) = if opts.resume {
        let (exp, cp) = load_checkpoint(cfg, dir)?;
        truncate_to(&decisions_path, cp.decisions_len)?;
        truncate_to(&estimates_path, cp.estimates_len)?;
        (exp, cp.decisions_len, cp.estimates_len)
    } else {
        let exp = Experiment::new(cfg)?;
        write_json(&dir.join(CONFIG_FILE), exp.config())?;
        for p in [&decisions_path, &estimates_path] {
            File::create(p).map_err(io_err(p))?;
        }
        (exp, 0, 0)
    };
    write_atomic(&dir.join(WEIGHTS_FILE), exp.weights().to_json().as_bytes()).map_err(io_err(dir))?;

    let stop = opts.stop_after.unwrap_or(usize::MAX).min(exp.config().n_cycles);
    while exp.progress().next_cycle < stop {
        let out = exp.run_cycle()?;
        decisions_len = append_lines(&decisions_path, &out.decisions)?;
        estimates_len = append_lines(&estimates_path, &out.estimates)?;
    }
    write_checkpoint(&exp, dir, decisions_len, estimates_len)?;
    if !exp.is_finished() {
        return Ok(RunStatus::Paused {
            next_cycle: exp.progress().next_cycle,
        });
    }

    let outcomes = exp.outcomes();
    let path = dir.join(OUTCOMES_FILE);
    let _ = std::fs::remove_file(&path);
    append_lines(&path, &outcomes)?;
    let report = exp.lift_report()?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    write_atomic(&dir.join(REPORT_TABLE_FILE), report.render_table().as_bytes()).map_err(io_err(dir))?;
    Ok(RunStatus::Finished(report))
}

pub fn report_json(report: &LiftReport) -> String {
    serde_json::to_string_pretty(report).expect("serialisable")
}

/// Recomputes the lift report of a finished run from its recorded outcomes.
pub fn report_from_dir(dir: &Path) -> Result<LiftReport, RunError> {
    let cfg: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
    let path = dir.join(OUTCOMES_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let outcomes = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<UserOutcome>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| RunError::Json { path, source })?;
    Ok(report_from_outcomes(&cfg, &outcomes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::from_toml_str(super::super::config::tests::EXAMPLE).unwrap()
    }

    #[test]
    fn finished_run_writes_every_artefact() {
        let dir = tempfile::tempdir().unwrap();
        let status = run_to_dir(cfg(), dir.path(), RunOptions::default()).unwrap();
        let RunStatus::Finished(report) = status else {
            panic!("expected a finished run")
        };
        for f in [
            CONFIG_FILE,
            DECISIONS_FILE,
            ESTIMATES_FILE,
            STATE_FILE,
            EVENTS_FILE,
            PROGRESS_FILE,
            WEIGHTS_FILE,
            OUTCOMES_FILE,
            REPORT_FILE,
            REPORT_TABLE_FILE,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(report_from_dir(dir.path()).unwrap(), report);
        let decisions = std::fs::read_to_string(dir.path().join(DECISIONS_FILE)).unwrap();
        assert_eq!(decisions.lines().count(), 4 * 20);
    }

    #[test]
    fn paused_and_resumed_run_matches_uninterrupted() {
        let whole = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        run_to_dir(cfg(), whole.path(), RunOptions::default()).unwrap();
        let paused = run_to_dir(
            cfg(),
            split.path(),
            RunOptions {
                stop_after: Some(2),
                resume: false,
            },
        )
        .unwrap();
        assert_eq!(paused, RunStatus::Paused { next_cycle: 2 });
        // a stray line from an interrupted cycle is discarded on resume
        append_lines(&split.path().join(DECISIONS_FILE), &["junk"]).unwrap();
        run_to_dir(
            cfg(),
            split.path(),
            RunOptions {
                stop_after: None,
                resume: true,
            },
        )
        .unwrap();
        for f in [DECISIONS_FILE, ESTIMATES_FILE, STATE_FILE, OUTCOMES_FILE, REPORT_FILE] {
            let a = std::fs::read(whole.path().join(f)).unwrap();
            let b = std::fs::read(split.path().join(f)).unwrap();
            assert!(a == b, "{f} differs");
        }
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            stop_after: Some(1),
            resume: false,
        };
        run_to_dir(cfg(), dir.path(), opts).unwrap();
        let mut other = cfg();
        other.sim.seed += 1;
        let resume = RunOptions {
            stop_after: None,
            resume: true,
        };
        assert!(matches!(
            run_to_dir(other, dir.path(), resume),
            Err(RunError::Mismatch(_))
        ));
    }
}
