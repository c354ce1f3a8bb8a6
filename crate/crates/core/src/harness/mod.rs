//! Experiment runner: wires the simulator, outcome scoring, DiD estimation,
//! Thompson sampling and message matching into a closed loop with a held-out
//! control group, and reports matched-pair lift.

pub mod config;
pub mod experiment;
pub mod lift;
pub mod runner;
pub mod state;

pub use config::{ConfigError, ContextMode, ExperimentConfig, MetricKind, MetricSpec};
pub use experiment::{
    report_from_outcomes, run_experiment, CycleOutput, DecisionRecord, DecisionStatus, EstimateRecord, Experiment,
    ExperimentResult, HarnessError, Progress,
};
pub use lift::{matched_lift, pair_nearest, LiftError, LiftReport, MetricLift, UserOutcome};
pub use runner::{report_from_dir, run_to_dir, RunError, RunOptions, RunStatus};
pub use state::{restore_state, snapshot_state, StateError};
