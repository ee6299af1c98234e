//! Two-agent AutoML engine.
//!
//! A Reasoning agent turns conversational instructions into a plan of tool
//! calls (ReAct style); a Coding agent writes pipeline scripts in a small,
//! closed DSL, runs them against the native data and ML toolkits, and repairs
//! them from diagnostics. Sessions are event-sourced so every run can be
//! replayed and audited.
//!
//! Module map:
//!
//! - [`react`]: trace grammar, turn parsing, prompt rendering
//! - [`llm`]: chat-completion backends (HTTP, scripted fixture, replay cache)
//! - [`data`]: CSV ingestion, profiling, preprocessing transforms
//! - [`ml`]: learners, metrics, cross-validation, hyperparameter search
//! - [`dsl`]: pipeline language parser, validator and interpreter
//! - [`agents`]: Reasoning and Coding agents, stage machine, finalization
//! - [`session`]: journal, blob store, session lifecycle and replay
//! - [`harness`]: end-to-end run, journal verification, benchmark
//! - [`synth`]: seeded generators for the bundled datasets
//! - [`fuzz`]: random script generators for property tests

pub mod agents;
pub mod data;
pub mod dsl;
pub mod fuzz;
pub mod harness;
pub mod llm;
pub mod ml;
pub mod react;
pub mod rng;
pub mod session;
pub mod synth;

/// Stable machine-readable error code, shared by every error enum in the crate.
pub trait ErrorCode {
    fn code(&self) -> &'static str;
}
