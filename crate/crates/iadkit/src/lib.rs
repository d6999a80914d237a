//! Harness for a tool-driven visual inspection agent on industrial anomaly
//! detection data.
//!
//! The crate covers the full loop around a pluggable vision-chat endpoint:
//!
//! - [`protocol`] — the agent's wire format (`<think>`, `<tool_call>`,
//!   `<answer>`) and the system/user prompt builders.
//! - [`tools`] — the zoom (normalized-bbox crop) and reference-retrieval
//!   tools the agent may call.
//! - [`rewards`] — the two-part verifiable reward: perception (accuracy,
//!   IoU, type) and behavior (correctness, diversity, efficiency).
//! - [`grpo`] — group-relative advantages, clipped surrogate, KL penalty,
//!   and zero-advantage filtering over external token log-probabilities.
//! - [`trajectory`] — supervised trajectory construction with loss masks.
//! - [`rollout`] — multi-turn episode orchestration and rollout groups.
//! - [`eval`] — category-averaged accuracy reports and episode replay.
//!
//! Batch paths (group rollouts, episode scoring, evaluation fan-out) run on
//! rayon under the default `parallel` feature and fall back to sequential
//! iterators without it.

pub mod backend;
pub mod bbox;
pub mod config;
pub mod eval;
pub mod grpo;
pub(crate) mod par;
pub mod protocol;
pub mod rewards;
pub mod rollout;
pub mod sample;
pub mod synthetic;
pub mod tools;
pub mod trajectory;

pub use bbox::Bbox;
pub use sample::{Dataset, Label, SampleRecord};
