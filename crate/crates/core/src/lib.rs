//! Core library for building topology-aware semantic IDs for points of
//! interest and for scoring top-k recommendation lists with rule-based
//! rewards.
//!
//! The pipeline runs left to right through the modules:
//!
//! - [`dataset`]: check-in ingestion, filtering, trajectories and splits,
//!   plus a seeded synthetic corpus generator.
//! - [`features`]: the one-hot semantic feature vector of every POI.
//! - [`encoder`]: a small contrastively trained encoder that smooths the
//!   feature vectors before quantization.
//! - [`hsom`]: the residual hierarchical self-organizing map and the
//!   semantic ID tables it produces.
//! - [`continuity`]: null-referenced compactness/separation metrics over ID
//!   coordinate spaces.
//! - [`prompting`]: question/answer prompts with long- and short-term memory.
//! - [`rewards`]: completion parsing and the five list rewards.
//! - [`rftsim`]: group-relative advantages, a toy softmax policy and the
//!   Acc@k / MRR evaluators.

pub mod continuity;
pub mod dataset;
pub mod encoder;
pub mod features;
pub mod hsom;
pub mod prompting;
pub mod rewards;
pub mod rftsim;

mod rng;

pub use rng::{derive_seed, seeded_rng};
