//! Deterministic device simulator for the agent kernel.
//!
//! A run boots a simulated platform, provisions a registry and kernel,
//! installs mock apps (and any look-alike), starts one thread per app agent
//! and replays a scripted system agent against them. Verdicts come from a
//! post-run inspection of app state and the audit log.

pub mod agent;
pub mod engine;
pub mod guard;
pub mod inspect;
pub mod process;
pub mod scenario;
pub mod suite;
pub mod world;

pub use engine::{run, run_scenario, Run, RunOptions, RunReport, SimError};
pub use inspect::RunOutcome;
pub use scenario::{shipped, Expected, Scenario, ScenarioKind};
pub use suite::{run_suite, Rate, SuiteReport};
