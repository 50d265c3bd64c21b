//! Human value detection for argumentative text.
//!
//! The crate covers the ValueEval corpus model, the multi-label BCE and
//! label-weighted contrastive objectives, a backend-agnostic encoder contract,
//! classifier fine-tuning, prompt tuning across five template modes,
//! chain-of-thought evaluation of chat LLMs, and macro-F1 scoring.

pub mod assets;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod llm;
pub mod losses;
pub mod metrics;
pub mod prompting;
pub mod training;

pub use corpus::{Argument, Dataset, LabelMatrix, Stance, ValueTaxonomy};
pub use error::{Error, Result};
pub use metrics::RunResult;
