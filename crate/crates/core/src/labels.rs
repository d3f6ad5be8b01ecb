//! Closed label vocabularies, canonical normalization and the ground-truth
//! record model shared by every other module.
//!
//! Ground truth is strict: labels must normalize into the vocabulary or
//! loading fails. Predictions are lenient: any normalized string is kept and
//! simply scored as a mismatch when it is out of vocabulary.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 14 event categories, in template order.
pub const EVENT_VOCABULARY: [&str; 14] = [
    "HURRICANE",
    "FLOOD",
    "EARTHQUAKE",
    "DISASTER EVENTS",
    "EXPLOSION",
    "BOMBING",
    "FIRE",
    "LANDSLIDE",
    "CRASH",
    "DISEASE",
    "SHOOTING",
    "COLLAPSE",
    "HAZARD",
    "VOLCANO",
];

/// The 16 humanitarian aid types, in template order.
pub const AID_VOCABULARY: [&str; 16] = [
    "NOT HUMANITARIAN",
    "OTHER RELEVANT INFORMATION",
    "DONATION AND VOLUNTEERING",
    "REQUESTS OR NEEDS",
    "SYMPATHY AND SUPPORT",
    "INFRASTRUCTURE AND UTILITY DAMAGE",
    "AFFECTED INDIVIDUAL",
    "CAUTION AND ADVICE",
    "INJURED OR DEAD PEOPLE",
    "DISEASE RELATED",
    "RESPONSE EFFORTS",
    "PERSONAL UPDATE",
    "MISSING AND FOUND PEOPLE",
    "DISPLACED AND EVACUATION",
    "PHYSICAL LANDSLIDE",
    "TERRORISM RELATED",
];

/// One of the 14 disaster event categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventType(usize);

/// One of the 16 humanitarian aid types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AidType(usize);

impl EventType {
    /// Look up a canonical (already normalized) label.
    pub fn from_canonical(label: &str) -> Option<Self> {
        EVENT_VOCABULARY.iter().position(|v| *v == label).map(Self)
    }

    pub fn as_str(self) -> &'static str {
        EVENT_VOCABULARY[self.0]
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..EVENT_VOCABULARY.len()).map(Self)
    }
}

impl AidType {
    pub fn from_canonical(label: &str) -> Option<Self> {
        AID_VOCABULARY.iter().position(|v| *v == label).map(Self)
    }

    pub fn as_str(self) -> &'static str {
        AID_VOCABULARY[self.0]
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..AID_VOCABULARY.len()).map(Self)
    }
}

impl std::fmt::Display for EventType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::fmt::Display for AidType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for EventType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for EventType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        EventType::from_canonical(&normalize_label(&raw))
            .ok_or_else(|| serde::de::Error::custom(format!("unknown event type {raw:?}")))
    }
}

impl Serialize for AidType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AidType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        AidType::from_canonical(&normalize_label(&raw))
            .ok_or_else(|| serde::de::Error::custom(format!("unknown aid type {raw:?}")))
    }
}

/// Complete ground-truth annotation for one tweet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelTriple {
    pub event: EventType,
    pub useful: bool,
    pub aid: AidType,
}

/// A possibly incomplete prediction. Absent fields mark an invalid response;
/// present strings are normalized but may be out of vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PartialLabelTriple {
    pub event: Option<String>,
    pub useful: Option<bool>,
    pub aid: Option<String>,
}

impl PartialLabelTriple {
    /// True when all three fields are present.
    pub fn is_complete(&self) -> bool {
        self.event.is_some() && self.useful.is_some() && self.aid.is_some()
    }

    /// Encode a ground-truth triple as a (trivially complete) prediction.
    pub fn from_truth(truth: &LabelTriple) -> Self {
        PartialLabelTriple {
            event: Some(truth.event.as_str().to_owned()),
            useful: Some(truth.useful),
            aid: Some(truth.aid.as_str().to_owned()),
        }
    }
}

/// One labeled tweet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TweetRecord {
    pub id: String,
    pub text: String,
    pub truth: LabelTriple,
}

/// Canonicalize a raw label string.
///
/// Uppercases, maps underscores to spaces, collapses internal whitespace runs
/// to a single space, and strips surrounding quote, bracket, comma and period
/// characters. Total and idempotent; the stripping runs last so it cannot
/// expose new surrounding punctuation.
pub fn normalize_label(raw: &str) -> String {
    let upper = raw.replace('_', " ").to_uppercase();
    let collapsed = upper.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || "\"'`[]{}().,".contains(c))
        .to_owned()
}

/// Interpret a raw string as the binary usefulness label.
///
/// Case-insensitive `true`/`yes` and `false`/`no` after the same surrounding
/// punctuation stripping as [`normalize_label`]; anything else is absent.
pub fn parse_useful(raw: &str) -> Option<bool> {
    let stripped = raw.trim_matches(|c: char| c.is_whitespace() || "\"'`[]{}().,".contains(c));
    match stripped.to_ascii_lowercase().as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

/// Wire shape of one input corpus line.
#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    text: String,
    event_type: String,
    informative: BoolOrString,
    humanitarian_type: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BoolOrString {
    Bool(bool),
    Text(String),
}

/// Load a JSON-lines corpus of labeled tweets.
///
/// Each line carries `text`, `event_type`, `informative` and
/// `humanitarian_type`; `id` is synthesized from the 0-based line index when
/// absent. Ground-truth labels must normalize into the vocabularies.
pub fn load_records(source: impl std::io::Read) -> Result<Vec<TweetRecord>> {
    let reader = std::io::BufReader::new(source);
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    for (index, line) in reader.lines().enumerate() {
        let lineno = index + 1;
        let line = line.map_err(|e| Error::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: "empty line".into(),
            });
        }
        let raw: RawRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: lineno,
                reason: e.to_string(),
            })?;
        if raw.text.is_empty() {
            return Err(Error::MalformedRecord {
                line: lineno,
                reason: "text must be non-empty".into(),
            });
        }
        let event_norm = normalize_label(&raw.event_type);
        let event = EventType::from_canonical(&event_norm).ok_or_else(|| Error::UnknownLabel {
            line: lineno,
            field: "event_type",
            value: raw.event_type.clone(),
        })?;
        let aid_norm = normalize_label(&raw.humanitarian_type);
        let aid = AidType::from_canonical(&aid_norm).ok_or_else(|| Error::UnknownLabel {
            line: lineno,
            field: "humanitarian_type",
            value: raw.humanitarian_type.clone(),
        })?;
        let useful = match raw.informative {
            BoolOrString::Bool(b) => b,
            BoolOrString::Text(s) => parse_useful(&s).ok_or(Error::UnknownLabel {
                line: lineno,
                field: "informative",
                value: s,
            })?,
        };
        let id = raw.id.unwrap_or_else(|| index.to_string());
        if !seen_ids.insert(id.clone()) {
            return Err(Error::DuplicateId { id });
        }
        records.push(TweetRecord {
            id,
            text: raw.text,
            truth: LabelTriple { event, useful, aid },
        });
    }
    Ok(records)
}

/// Serialize records back to the corpus wire format, one JSON object per line.
pub fn save_records(records: &[TweetRecord], mut sink: impl Write) -> std::io::Result<()> {
    for r in records {
        let line = serde_json::json!({
            "id": r.id,
            "text": r.text,
            "event_type": r.truth.event.as_str(),
            "informative": r.truth.useful,
            "humanitarian_type": r.truth.aid.as_str(),
        });
        writeln!(sink, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_sizes() {
        assert_eq!(EVENT_VOCABULARY.len(), 14);
        assert_eq!(AID_VOCABULARY.len(), 16);
    }

    #[test]
    fn vocabularies_are_disjoint_and_canonical() {
        let events: HashSet<&str> = EVENT_VOCABULARY.iter().copied().collect();
        let aids: HashSet<&str> = AID_VOCABULARY.iter().copied().collect();
        assert_eq!(events.len(), 14);
        assert_eq!(aids.len(), 16);
        assert!(events.is_disjoint(&aids));
        for v in EVENT_VOCABULARY.iter().chain(AID_VOCABULARY.iter()) {
            assert_eq!(normalize_label(v), *v, "vocabulary entry not canonical");
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_label("donation_and_volunteering"),
            "DONATION AND VOLUNTEERING"
        );
        assert_eq!(normalize_label("HURRICANE"), "HURRICANE");
        assert_eq!(normalize_label("  \"Disaster   Events\", "), "DISASTER EVENTS");
    }

    #[test]
    fn parse_useful_examples() {
        assert_eq!(parse_useful("True"), Some(true));
        assert_eq!(parse_useful("FALSE"), Some(false));
        assert_eq!(parse_useful("maybe"), None);
        assert_eq!(parse_useful("\"True\","), Some(true));
        assert_eq!(parse_useful("no"), Some(false));
    }

    fn line(id: &str, event: &str, useful: &str, aid: &str) -> String {
        format!(
            r#"{{"id":"{id}","text":"t","event_type":"{event}","informative":{useful},"humanitarian_type":"{aid}"}}"#
        )
    }

    #[test]
    fn load_single_record() {
        let data = line("a", "fire", "true", "caution_and_advice");
        let records = load_records(data.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].truth.event.as_str(), "FIRE");
        assert!(records[0].truth.useful);
        assert_eq!(records[0].truth.aid.as_str(), "CAUTION AND ADVICE");
    }

    #[test]
    fn load_empty_stream() {
        assert!(load_records(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn load_rejects_out_of_vocabulary_truth() {
        let data = line("a", "tornado", "true", "caution_and_advice");
        let err = load_records(data.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("tornado"), "{msg}");
    }

    #[test]
    fn load_reports_line_number() {
        let good = line("a", "fire", "true", "caution_and_advice");
        let data = format!("{good}\nnot json");
        let err = load_records(data.as_bytes()).unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let l = line("a", "fire", "true", "caution_and_advice");
        let data = format!("{l}\n{l}");
        let err = load_records(data.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::DuplicateId { .. }));
    }

    #[test]
    fn load_synthesizes_ids_from_line_index() {
        let data = r#"{"text":"t","event_type":"FLOOD","informative":false,"humanitarian_type":"PERSONAL UPDATE"}"#;
        let records = load_records(data.as_bytes()).unwrap();
        assert_eq!(records[0].id, "0");
    }

    #[test]
    fn load_accepts_informative_string() {
        let data = line("a", "fire", "\"False\"", "not_humanitarian");
        let records = load_records(data.as_bytes()).unwrap();
        assert!(!records[0].truth.useful);
    }

    #[test]
    fn save_then_load_is_identity() {
        let data = [
            line("a", "fire", "true", "caution_and_advice"),
            line("b", "Disaster events", "false", "NOT HUMANITARIAN"),
        ]
        .join("\n");
        let records = load_records(data.as_bytes()).unwrap();
        let mut buf = Vec::new();
        save_records(&records, &mut buf).unwrap();
        let reloaded = load_records(&buf[..]).unwrap();
        assert_eq!(records, reloaded);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in ".{0,64}") {
            let once = normalize_label(&raw);
            prop_assert_eq!(normalize_label(&once), once);
        }

        #[test]
        fn normalize_never_panics_and_has_no_runs(raw in ".{0,64}") {
            let out = normalize_label(&raw);
            prop_assert!(!out.contains("  "));
            prop_assert!(!out.contains('_'));
        }
    }
}
