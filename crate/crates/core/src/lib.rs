//! Zero-shot named entity recognition with an ensemble of chat-completion
//! models.
//!
//! Each sentence goes through three stages: every extraction model lists
//! entities independently, a voting panel keeps the candidates a strict
//! majority accepts, and a disambiguation panel picks one non-overlapping
//! combination for every group of overlapping survivors. [`search`] finds
//! the per-stage model subsets that score best on a small labeled sample.

pub mod backend;
pub mod cli;
pub mod dataio;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod prompting;
pub mod search;
pub mod spans;
pub mod types;

pub use backend::{Backend, CompletionQuery, MockScript};
pub use dataio::GoldDataset;
pub use pipeline::{AblationFlags, Pipeline, SentenceResult};
pub use prompting::PromptSet;
pub use types::{EnsembleConfig, EntityRef, EntityTypeSchema, EvalReport, MentionCandidate, Sentence, Span};
