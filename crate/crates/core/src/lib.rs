//! Planner and simulator for disaggregated multimodal-LLM training.
//!
//! The crate splits a multimodal model into three parallelism units
//! (modality encoder, LLM backbone, modality generator), chooses GPU counts
//! and TP/DP/PP sizes for each, reorders heterogeneous training samples to
//! reduce stragglers and pipeline bubbles, and checks every decision against
//! a 1F1B pipeline simulator.

// Negated float comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod model;
pub mod par;
pub mod sim;
pub mod orchestrator;
pub mod reorder;
pub mod workload;
