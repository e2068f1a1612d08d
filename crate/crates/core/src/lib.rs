//! Core engine for rubric-based short-answer scoring with Monte Carlo
//! decision trees.
//!
//! A question is described by a set of key answer elements, each assessed
//! as a binary Yes/No decision against a student response by sampling an
//! LLM backend several times. The sampled decision distributions form a
//! tree whose root-to-leaf paths are complete decision vectors; a
//! deterministic rubric maps each vector to a mark, and path probabilities
//! are the products of the per-node decision frequencies. Tree paths are
//! then summarized into response-level rationales and assembled into SFT,
//! preference-pair, and rationale-to-score datasets.
//!
//! Module map:
//! - [`domain`]: shared value types (questions, responses, trees, records)
//! - [`rubric`]: rubric representation, evaluation, validation, compilation
//! - [`backend`]: chat-completion backends (remote HTTP, seeded mock, cache)
//! - [`prompt`]: prompt templates and rendering modes
//! - [`tree`]: decision sampling and tree construction
//! - [`factory`]: path summarization and dataset assembly
//! - [`preference`]: Bradley-Terry / reward-NLL / DPO scalar math
//! - [`metrics`]: accuracy, macro-F1, quadratic weighted kappa, extraction
//! - [`json`]: canonical (sorted-key) JSON and JSONL helpers

pub mod backend;
pub mod domain;
pub mod factory;
pub mod json;
pub mod metrics;
pub mod preference;
pub mod prompt;
pub mod rubric;
pub mod tree;
