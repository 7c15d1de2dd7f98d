//! Environment preparation and evaluation harness for software-engineering
//! agent training: dependency-pruned images, a streaming build/evaluate
//! pipeline, patch grading, and rollout scheduling.

pub mod backend;
pub mod cli;
pub mod dist;
pub mod eval;
pub mod model;
pub mod patch;
pub mod pipeline;
pub mod plan;
pub mod pruner;
pub mod scheduler;
pub mod synth;
pub mod version;
