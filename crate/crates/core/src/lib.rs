//! Prescriptive process monitoring: compile historical event logs into a
//! Markov decision process, learn a next-activity policy for one actor with
//! Monte Carlo policy iteration, and evaluate that policy by simulation and
//! against held-out traces.
//!
//! The pipeline is split along the modules below:
//!
//! * [`eventlog`] parses, filters, splits and annotates logs.
//! * [`scenarios`] holds the declarative [`scenarios::ScenarioSpec`] (actor
//!   partition, feature rules, reward terms), the bundled Loans and Fines
//!   specs, and a synthetic log generator with a known optimum.
//! * [`mdp`] replays annotated traces into an [`mdp::Mdp`].
//! * [`rl`] learns policies and ships an exact dynamic-programming solver.
//! * [`simeval`] and [`logeval`] evaluate policies.

pub mod artifact;
pub mod eventlog;
pub mod logeval;
pub mod mdp;
pub mod rl;
pub mod scenarios;
pub mod seeding;
pub mod simeval;

pub use eventlog::{AnnotatedLog, AnnotatedTrace, Event, EventLog, Feature, Trace, Value};
pub use mdp::{Mdp, State};
pub use rl::{Policy, PolicyKind, QTable};
pub use scenarios::ScenarioSpec;
