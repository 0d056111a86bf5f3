//! Desk-scale laboratory for tweet sentiment analysis with pretrained
//! transformer encoders.
//!
//! The pipeline runs end to end on a single core:
//!
//! * [`corpus`] reads and writes tweet TSV files, samples validation splits
//!   and builds paired examples for replaced-token-detection pretraining;
//! * [`preprocess`] normalizes raw tweets (tokenization, URL removal,
//!   mention collapsing and numbering, lowercasing);
//! * [`tokenizer`] holds the subword vocabulary, the greedy longest-match
//!   encoder, `[UNK]` auditing and emoticon augmentation;
//! * [`model`] is a small pre-norm transformer encoder with MLM,
//!   discriminator and `[CLS]` classification heads, analytic gradients and
//!   a binary checkpoint format;
//! * [`train`] implements masking, the losses, Adam and the pretraining and
//!   fine-tuning loops;
//! * [`evaluate`] computes accuracy, confusion matrices and results tables;
//! * [`analyze`] projects `[CLS]` vectors with PCA and t-SNE and renders an
//!   SVG scatter plot;
//! * [`pipeline`] wires everything together for the command-line tool,
//!   including strict TOML configuration and the `demo` run.

pub mod analyze;
pub mod corpus;
mod error;
pub mod evaluate;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
