//! Per-user message personalisation: event-stream outcome scoring,
//! Difference-in-Differences treatment effects, Thompson sampling over a
//! modular action space, catalogue matching, and a synthetic-user simulator
//! with an experiment harness.

pub mod duration;
pub mod event_model;
pub mod harness;
pub mod ite;
pub mod outcome;
pub mod policy;
pub mod seed;
pub mod simulator;
pub mod synthesis;

pub use event_model::{EventRecord, EventStream, GoalSpec, Millis, Window};
pub use ite::{DidConfig, IteEstimate, UserProfile};
pub use outcome::{DecayConfig, EventWeightTable};
pub use policy::{ActionCombo, ActionSpace, BetaPosterior, PosteriorStore};
pub use seed::SeedTree;
pub use synthesis::{MessageCatalog, MessageTemplate};
