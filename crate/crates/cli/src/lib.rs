//! Pipeline plumbing for the `sidforge` command: configuration, artifact
//! headers and digests, and one runner per stage.
//!
//! Stages run in the order ingest, featurize, encode, quantize,
//! continuity, prompts, score, simulate, evaluate. Each writes
//! self-describing artifacts under the output directory and refuses
//! upstream artifacts produced under a different configuration.

pub mod artifact;
pub mod config;
pub mod pipeline;
pub mod stages;

pub use config::Config;
pub use stages::{run, Ctx, Outcome, Paths, STAGES};
