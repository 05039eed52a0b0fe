//! Alert-scoped log diagnosis engine: parses alert expressions to recover
//! intent, scopes the relevant logs with an LLM-generated (and cached)
//! filter tool, reduces them to per-request event chains, clusters similar
//! requests, and drives LLM root-cause analysis per cluster before
//! synthesizing one diagnostic report per alert.

pub mod chains;
pub mod clustering;
pub mod diagnosis;
pub mod llm;
pub mod parsing;
pub mod pipeline;
pub mod promql;
pub mod scoping;
pub mod store;
pub mod synth;
