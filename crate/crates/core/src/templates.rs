//! The five prompt templates and their rendering into inference prompts,
//! supervised targets and full training texts.
//!
//! The template bodies are embedded from `templates/type{1..5}.txt` at the
//! repository root so code, tests and exported manifests share one source of
//! truth. Placeholders: `{text}` is the tweet slot, `{REPOSE}` the response
//! slot.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::labels::LabelTriple;

pub const TEMPLATE_T1: &str = include_str!("../../../templates/type1.txt");
pub const TEMPLATE_T2: &str = include_str!("../../../templates/type2.txt");
pub const TEMPLATE_T3: &str = include_str!("../../../templates/type3.txt");
pub const TEMPLATE_T4: &str = include_str!("../../../templates/type4.txt");
pub const TEMPLATE_T5: &str = include_str!("../../../templates/type5.txt");

const TEXT_SLOT: &str = "{text}";
const RESPONSE_SLOT: &str = "{REPOSE}";

/// Identifies one of the five prompt templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    #[serde(rename = "T1_EVENT")]
    T1Event,
    #[serde(rename = "T2_USEFUL")]
    T2Useful,
    #[serde(rename = "T3_AID")]
    T3Aid,
    #[serde(rename = "T4_MULTI")]
    T4Multi,
    #[serde(rename = "T5_MULTI_INST")]
    T5MultiInst,
}

impl TemplateId {
    /// All five templates, in type order.
    pub const ALL: [TemplateId; 5] = [
        TemplateId::T1Event,
        TemplateId::T2Useful,
        TemplateId::T3Aid,
        TemplateId::T4Multi,
        TemplateId::T5MultiInst,
    ];

    /// The four single- and multi-label training templates.
    pub const TRAINING: [TemplateId; 4] = [
        TemplateId::T1Event,
        TemplateId::T2Useful,
        TemplateId::T3Aid,
        TemplateId::T4Multi,
    ];

    pub fn body(self) -> &'static str {
        match self {
            TemplateId::T1Event => TEMPLATE_T1,
            TemplateId::T2Useful => TEMPLATE_T2,
            TemplateId::T3Aid => TEMPLATE_T3,
            TemplateId::T4Multi => TEMPLATE_T4,
            TemplateId::T5MultiInst => TEMPLATE_T5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::T1Event => "T1_EVENT",
            TemplateId::T2Useful => "T2_USEFUL",
            TemplateId::T3Aid => "T3_AID",
            TemplateId::T4Multi => "T4_MULTI",
            TemplateId::T5MultiInst => "T5_MULTI_INST",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::T1Event => "type1.txt",
            TemplateId::T2Useful => "type2.txt",
            TemplateId::T3Aid => "type3.txt",
            TemplateId::T4Multi => "type4.txt",
            TemplateId::T5MultiInst => "type5.txt",
        }
    }

    /// The line after which generation is expected to start, including its
    /// terminating newline.
    fn prompt_end_marker(self) -> &'static str {
        match self {
            TemplateId::T5MultiInst => "[/INST]\n",
            _ => "### Response:\n",
        }
    }

    /// SHA-256 digest of the template body, hex encoded.
    pub fn digest(self) -> String {
        hex::encode(Sha256::digest(self.body().as_bytes()))
    }
}

impl std::fmt::Display for TemplateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "T1" | "T1_EVENT" => Ok(TemplateId::T1Event),
            "T2" | "T2_USEFUL" => Ok(TemplateId::T2Useful),
            "T3" | "T3_AID" => Ok(TemplateId::T3Aid),
            "T4" | "T4_MULTI" => Ok(TemplateId::T4Multi),
            "T5" | "T5_MULTI_INST" => Ok(TemplateId::T5MultiInst),
            other => Err(format!(
                "unknown template {other:?} (expected T1_EVENT..T5_MULTI_INST)"
            )),
        }
    }
}

/// A prompt ready to send to a completion endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub text_slot: String,
    pub body: String,
}

/// Render the inference prompt for a tweet: the template with the text slot
/// filled, truncated just after the line where the response begins
/// (`### Response:` for T1-T4, `[/INST]` for T5).
pub fn render_prompt(id: TemplateId, tweet_text: &str) -> RenderedPrompt {
    debug_assert!(!tweet_text.is_empty());
    let filled = id.body().replacen(TEXT_SLOT, tweet_text, 1);
    let marker = id.prompt_end_marker();
    let end = filled
        .rfind(marker)
        .expect("template body carries its response marker")
        + marker.len();
    RenderedPrompt {
        template: id,
        text_slot: tweet_text.to_owned(),
        body: filled[..end].to_owned(),
    }
}

/// Render the supervised target for a template: the JSON-shaped response
/// string covering exactly the labels the template asks for.
pub fn render_target(id: TemplateId, truth: &LabelTriple) -> String {
    match id {
        TemplateId::T1Event => format!(r#"{{"event type": "{}"}}"#, truth.event),
        TemplateId::T2Useful => format!(r#"{{"useful": {}}}"#, truth.useful),
        TemplateId::T3Aid => format!(r#"{{"humanitarian aid type": "{}"}}"#, truth.aid),
        TemplateId::T4Multi | TemplateId::T5MultiInst => format!(
            r#"{{"event type": "{}", "useful": {}, "humanitarian aid type": "{}"}}"#,
            truth.event, truth.useful, truth.aid
        ),
    }
}

/// Render the full training text: the template with both the text and the
/// response slot filled, end-of-sequence marker included.
pub fn render_training_text(id: TemplateId, tweet_text: &str, truth: &LabelTriple) -> String {
    id.body()
        .replacen(TEXT_SLOT, tweet_text, 1)
        .replacen(RESPONSE_SLOT, &render_target(id, truth), 1)
}

/// Digests of all five template files, keyed by file name.
pub fn template_digests() -> std::collections::BTreeMap<String, String> {
    TemplateId::ALL
        .iter()
        .map(|t| (t.file_name().to_owned(), t.digest()))
        .collect()
}
