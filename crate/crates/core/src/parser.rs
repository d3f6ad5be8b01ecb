//! Turns raw generated text into a [`PartialLabelTriple`], decides validity,
//! and compares predictions against ground truth.
//!
//! Parsing steps:
//! 1. If a `response` header (`### Response:`, `Response:`, any case) occurs,
//!    only text after its last occurrence is scanned, so echoed prompts never
//!    contribute keys.
//! 2. Keys are matched by tolerant containment: anything containing
//!    `event type` for the event, `useful` for usefulness, and `human .. aid`
//!    for the aid type, in JSON or `key: value` line syntax.
//! 3. The first occurrence of a key decides its field. String values go
//!    through [`normalize_label`], the usefulness value through
//!    [`parse_useful`].
//! 4. A missing key (or a value that cleans to nothing) leaves the field
//!    absent; a response is valid only when all three fields are present.

use std::sync::LazyLock;

use regex::Regex;

use crate::labels::{normalize_label, parse_useful, LabelTriple, PartialLabelTriple};

static RESPONSE_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(?:#{1,6}[ \t]*)?response[ \t]*:").unwrap());

static EVENT_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)event[\s_-]*type[\s"'*]*:[ \t]*"#).unwrap());

static USEFUL_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)useful[a-z]*[\s"'*]*:[ \t]*"#).unwrap());

static AID_KEY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?i)human[a-z]*[\s_-]*aid[\s_-]*(?:type)?[\s"'*]*:[ \t]*"#).unwrap()
});

/// A parsed generation: the raw text, the extracted labels, and whether the
/// response is valid (all three fields present).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub raw: String,
    pub labels: PartialLabelTriple,
    pub valid: bool,
}

/// Per-field exact-match outcome of one prediction against ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub event_correct: bool,
    pub useful_correct: bool,
    pub aid_correct: bool,
    pub overall_correct: bool,
}

/// Parse raw generated text. Total: gibberish yields three absent fields and
/// an invalid response.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let region = match RESPONSE_HEADER.find_iter(raw).last() {
        Some(m) => &raw[m.end()..],
        None => raw,
    };

    let event = extract_first_value(region, &EVENT_KEY)
        .map(|v| normalize_label(&v))
        .filter(|v| !v.is_empty());
    let useful = extract_first_value(region, &USEFUL_KEY).and_then(|v| parse_useful(&v));
    let aid = extract_first_value(region, &AID_KEY)
        .map(|v| normalize_label(&v))
        .filter(|v| !v.is_empty());

    let labels = PartialLabelTriple { event, useful, aid };
    let valid = labels.is_complete();
    ParsedResponse {
        raw: raw.to_owned(),
        labels,
        valid,
    }
}

/// Raw value text after the first occurrence of `key` in `region`, if any.
///
/// A quoted value ends at its closing quote; a bare value runs to the first
/// newline, comma or brace.
fn extract_first_value(region: &str, key: &Regex) -> Option<String> {
    let m = key.find(region)?;
    let rest = &region[m.end()..];
    let bytes = rest.as_bytes();
    if let Some(&quote) = bytes.first().filter(|&&b| b == b'"' || b == b'\'') {
        if let Some(close) = rest[1..].find([quote as char, '\n']) {
            if rest.as_bytes()[1 + close] == quote {
                return Some(rest[1..1 + close].to_owned());
            }
        }
    }
    let end = rest
        .find(['\n', '\r', ',', '}', '{'])
        .unwrap_or(rest.len());
    Some(rest[..end].trim().to_owned())
}

/// Exact-match comparison on canonical forms. An absent predicted field
/// counts as incorrect; overall requires all three to match.
pub fn compare(pred: &ParsedResponse, truth: &LabelTriple) -> MatchResult {
    compare_labels(&pred.labels, truth)
}

/// [`compare`] on bare label triples, e.g. ensemble vote outcomes.
pub fn compare_labels(pred: &PartialLabelTriple, truth: &LabelTriple) -> MatchResult {
    let event_correct = pred.event.as_deref() == Some(truth.event.as_str());
    let useful_correct = pred.useful == Some(truth.useful);
    let aid_correct = pred.aid.as_deref() == Some(truth.aid.as_str());
    MatchResult {
        event_correct,
        useful_correct,
        aid_correct,
        overall_correct: event_correct && useful_correct && aid_correct,
    }
}
