//! Teamsmith: a multi-agent LLM collaboration engine and MCQ benchmark harness.
//!
//! A recruiter assembles a weighted team of specialists, a subset of six
//! teamwork mechanisms is switched on, the team runs a fixed three-round
//! discussion, and the final answers are combined by weighted vote.
//!
//! ```text
//! recruit::analyze_question ─► recruit::assemble_team ─► recruit::select_components
//!                                       │
//!                                       ▼
//!        collab::run_session (round 1 → coordination → round 2 → round 3)
//!                                       │
//!                                       ▼
//!                               decide::aggregate
//! ```
//!
//! The `bench` module drives sessions over line-delimited datasets with
//! seeded sampling, and the `teamsmith` binary exposes it all on the CLI.

pub mod backend;
pub mod bench;
pub mod channel;
pub mod cli;
pub mod collab;
pub mod decide;
pub mod domain;
pub mod recruit;
pub mod rng;
pub mod teamwork;
pub mod templates;

pub use domain::{
    normalize_weights, validate_question, AgentProfile, Decision, DomainError, Event, EventKind, ImageAttachment,
    Label, ModalityClass, Question, RoundTag, SessionTranscript, TeamworkConfig,
};
