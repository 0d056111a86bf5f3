//! Glue for the command-line tool: strict configuration, synthetic fixtures
//! and the end-to-end demo.

mod config;
mod demo;
pub mod fixtures;

use crate::corpus::TweetRecord;
use crate::preprocess::{normalize_tweet, PreprocessRules};
use crate::tokenizer::{encode, TokenId, Vocab};

pub use config::{validate_config, PipelineConfig};
pub use demo::{run_demo, DemoConfig, DemoOutcome, EXPERIMENTS};

/// Records with normalized text; ids and labels are kept.
pub fn normalize_records(records: &[TweetRecord], rules: &PreprocessRules) -> Vec<TweetRecord> {
    records
        .iter()
        .map(|r| TweetRecord {
            text: normalize_tweet(&r.text, rules),
            ..r.clone()
        })
        .collect()
}

pub fn texts(records: &[TweetRecord]) -> Vec<String> {
    records.iter().map(|r| r.text.clone()).collect()
}

/// Real-position ids of each record.
pub fn encode_records(records: &[TweetRecord], vocab: &Vocab, max_len: usize) -> Vec<Vec<TokenId>> {
    records.iter().map(|r| encode(&r.text, vocab, max_len).real_ids()).collect()
}
