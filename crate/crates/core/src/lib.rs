//! Abstention protocols for multiple-choice question answering.
//!
//! The crate evaluates how well a model declines to answer when it does not
//! know. The central protocol, Second Guess, asks each question twice: once
//! with the four original options and once with an extra "I don't know"
//! option. If the model names a different choice the second time, the answer
//! becomes an abstention; otherwise the first answer stands. Four baselines
//! (plain, IDK-augmented, self-verification, entropy thresholding) run through
//! the same machinery, and [`metrics`] scores all of them with precision,
//! error rate and composite risk.
//!
//! Layout:
//!
//! - [`mcqa`]: questions, shuffling, IDK insertion, prompt text, answer parsing
//! - [`datasets`]: JSONL/CSV ingestion, four-option normalization, sampling
//! - [`backend`]: HTTP chat-completions client, simulated model, response cache
//! - [`protocols`]: the six procedures and entropy thresholding
//! - [`metrics`]: tallies, metrics, change breakdown, aggregation, trend fit
//! - [`harness`]: configured runs, artifacts, reports
//! - [`population`]: synthetic question sets with knowledge profiles

pub mod backend;
pub mod datasets;
pub mod harness;
pub mod mcqa;
pub mod metrics;
pub mod population;
pub mod protocols;
pub mod seed;
