//! Instruction-dataset construction, completion-endpoint inference with
//! regeneration, free-text response parsing and scoring, and checkpoint
//! ensembling for multi-label disaster tweet classification, plus a
//! desk-scale low-rank adaptation module.
//!
//! The pipeline mirrors a three-stage workflow: build an instruction dataset
//! from labeled tweets (four instances per record over templates T1-T4),
//! drive saved-checkpoint endpoints over a test set with a bounded
//! regeneration loop, then score the parsed predictions and ensemble the top
//! checkpoints by majority vote.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod infer;
pub mod labels;
pub mod lora;
pub mod manifest;
pub mod mock;
pub mod parser;
pub mod templates;

pub use error::{Error, Result};
pub use labels::{
    normalize_label, parse_useful, AidType, EventType, LabelTriple, PartialLabelTriple,
    TweetRecord,
};
pub use parser::{compare, compare_labels, parse_response, MatchResult, ParsedResponse};
pub use templates::{render_prompt, render_target, RenderedPrompt, TemplateId};

/// Ground-truth lookup keyed by sample id, as the evaluator consumes it.
pub fn truth_map(records: &[TweetRecord]) -> std::collections::BTreeMap<String, LabelTriple> {
    records
        .iter()
        .map(|r| (r.id.clone(), r.truth))
        .collect()
}
