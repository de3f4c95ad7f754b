//! Attribute-level decomposition of referring expressions.
//!
//! An external chat model (or the offline [`mock_decompose`]) splits a caption
//! into target-centric attributes. Every attribute description must be a
//! verbatim span of the caption; [`validate`] enforces that and the other
//! extraction rules before a result is accepted.

mod client;
mod mock;

pub use client::{
    decompose, decompose_many, Backoff, ChatClient, DecomposeError, DecomposeOutcome,
    MockClient, TranscriptEntry, TransportError,
};
#[cfg(feature = "http")]
pub use client::{HttpChatClient, LlmEndpoint};
pub use mock::mock_decompose;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Default cap on attributes kept per text.
pub const DEFAULT_A_MAX: usize = 10;

/// Version tag of the embedded prompt template.
pub const PROMPT_VERSION: &str = "attribute_prompt_v1";

const PROMPT_TEMPLATE: &str = include_str!("../../assets/attribute_prompt_v1.txt");
const CAPTION_SLOT: &str = "{{caption}}";

/// Aspects named in the prompt. Anything else is kept but flagged.
pub const KNOWN_ASPECTS: &[&str] = &[
    "category",
    "color",
    "size",
    "shape",
    "material",
    "texture",
    "number",
    "state",
    "part",
    "text",
    "brand",
    "activity",
    "pose",
    "status",
    "position",
    "orientation",
    "spatial_relation",
    "distance",
    "environment",
    "weather",
    "time",
    "context",
    "purpose",
    "other",
];

pub fn is_known_aspect(aspect: &str) -> bool {
    KNOWN_ASPECTS.contains(&aspect)
}

/// One extracted attribute: a verbatim value tagged with its semantic aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub aspect: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<String>,
    pub confidence: f64,
}

impl Attribute {
    /// The attribute a category name carries for itself.
    pub fn category(text: &str) -> Self {
        Self {
            aspect: "category".to_string(),
            description: text.to_string(),
            evidence: Vec::new(),
            confidence: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub primary_target: String,
    pub attributes: Vec<Attribute>,
    #[serde(default)]
    pub analysis: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("caption is empty")]
    EmptyCaption,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error("reply is not a JSON object")]
    NotAnObject,
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{field}` has the wrong type (expected {expected})")]
    WrongType { field: String, expected: &'static str },
}

/// Builds the extraction prompt for one caption.
///
/// Double quotes and backslashes in the caption are escaped because the
/// caption sits inside a quoted line of the template.
pub fn build_prompt(caption: &str) -> Result<String, PromptError> {
    if caption.trim().is_empty() {
        return Err(PromptError::EmptyCaption);
    }
    let escaped = caption.replace('\\', "\\\\").replace('"', "\\\"");
    Ok(PROMPT_TEMPLATE.replacen(CAPTION_SLOT, &escaped, 1))
}

/// Removes a surrounding markdown code fence, if any.
fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // Drop an info string such as `json` up to the first newline or brace.
    let body_start = rest
        .find(['\n', '{'])
        .unwrap_or(rest.len());
    let body = &rest[body_start..];
    body.trim().strip_suffix("```").unwrap_or(body).trim()
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a Value, ParseError> {
    obj.get(name)
        .ok_or_else(|| ParseError::MissingField(name.to_string()))
}

fn as_str(v: &Value, name: &str) -> Result<String, ParseError> {
    v.as_str().map(str::to_string).ok_or_else(|| ParseError::WrongType {
        field: name.to_string(),
        expected: "string",
    })
}

/// Parses a model reply into a [`DecompositionResult`].
pub fn parse_response(raw: &str) -> Result<DecompositionResult, ParseError> {
    let body = strip_fences(raw);
    let value: Value = serde_json::from_str(body).map_err(|e| ParseError::Json(e.to_string()))?;
    let obj = value.as_object().ok_or(ParseError::NotAnObject)?;
    let primary_target = as_str(field(obj, "primary_target")?, "primary_target")?;
    let attrs = field(obj, "attributes")?
        .as_array()
        .ok_or_else(|| ParseError::WrongType {
            field: "attributes".into(),
            expected: "array",
        })?;
    let mut attributes = Vec::with_capacity(attrs.len());
    for (i, a) in attrs.iter().enumerate() {
        let path = |f: &str| format!("attributes[{i}].{f}");
        let a = a.as_object().ok_or_else(|| ParseError::WrongType {
            field: format!("attributes[{i}]"),
            expected: "object",
        })?;
        let get = |f: &str| a.get(f).ok_or_else(|| ParseError::MissingField(path(f)));
        let aspect = as_str(get("aspect")?, &path("aspect"))?;
        let description = as_str(get("description")?, &path("description"))?;
        let confidence = get("confidence")?
            .as_f64()
            .ok_or_else(|| ParseError::WrongType {
                field: path("confidence"),
                expected: "number",
            })?;
        let evidence = match a.get("caption_evidence") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .iter()
                .map(|e| as_str(e, &path("caption_evidence")))
                .collect::<Result<_, _>>()?,
            Some(_) => {
                return Err(ParseError::WrongType {
                    field: path("caption_evidence"),
                    expected: "array of strings",
                })
            }
        };
        attributes.push(Attribute {
            aspect,
            description,
            evidence,
            confidence,
        });
    }
    let analysis = match obj.get("analysis") {
        Some(v) => as_str(v, "analysis")?,
        None => String::new(),
    };
    Ok(DecompositionResult {
        primary_target,
        attributes,
        analysis,
    })
}

/// Serializes a result in the reply schema the prompt asks for.
pub fn serialize_result(result: &DecompositionResult) -> String {
    let attrs: Vec<Value> = result
        .attributes
        .iter()
        .map(|a| {
            json!({
                "aspect": a.aspect,
                "description": a.description,
                "caption_evidence": a.evidence,
                "confidence": a.confidence,
            })
        })
        .collect();
    json!({
        "primary_target": result.primary_target,
        "attributes": attrs,
        "analysis": result.analysis,
    })
    .to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFlags {
    pub verbatim: bool,
    pub evidence_verbatim: bool,
    pub confidence_in_range: bool,
    pub known_aspect: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: Verdict,
    pub violations: Vec<Violation>,
    pub attribute_flags: Vec<AttributeFlags>,
}

impl ValidationReport {
    pub fn accepted(&self) -> bool {
        self.verdict == Verdict::Accept
    }

    pub fn has_rule(&self, rule_id: &str) -> bool {
        self.violations.iter().any(|v| v.rule_id == rule_id)
    }
}

/// Rule identifiers carried in [`Violation::rule_id`].
pub mod rules {
    pub const VERBATIM_DESCRIPTION: &str = "verbatim_description";
    pub const VERBATIM_EVIDENCE: &str = "verbatim_evidence";
    pub const CONFIDENCE_RANGE: &str = "confidence_range";
    pub const EMPTY_ATTRIBUTES: &str = "empty_attributes";
    pub const MISSING_CATEGORY: &str = "missing_category";
    pub const OVER_LIMIT: &str = "over_limit";
    pub const UNKNOWN_ASPECT: &str = "unknown_aspect";
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// Evidence quotes may be elided with a trailing `...`; the quoted part
/// before the ellipsis must still appear verbatim.
fn evidence_is_verbatim(caption_nfc: &str, evidence: &str) -> bool {
    let e = nfc(evidence);
    let quoted = e
        .strip_suffix("...")
        .or_else(|| e.strip_suffix('\u{2026}'))
        .unwrap_or(&e);
    !quoted.is_empty() && caption_nfc.contains(quoted)
}

/// Checks a parsed result against its caption.
///
/// Hard rules: every description and evidence quote is a byte-exact
/// substring of the caption after NFC normalization, confidences lie in
/// `[0, 1]`, and at least one attribute is present. Soft rules: a
/// `category` aspect exists, the count is at most `a_max`, and aspects come
/// from the known taxonomy.
pub fn validate(caption: &str, result: &DecompositionResult, a_max: usize) -> ValidationReport {
    let caption_nfc = nfc(caption);
    let mut violations = Vec::new();
    let mut flags = Vec::with_capacity(result.attributes.len());
    let mut push = |rule: &str, severity, message: String| {
        violations.push(Violation {
            rule_id: rule.to_string(),
            severity,
            message,
        })
    };

    if result.attributes.is_empty() {
        push(rules::EMPTY_ATTRIBUTES, Severity::Hard, "no attributes extracted".into());
    }
    for (i, a) in result.attributes.iter().enumerate() {
        let desc = nfc(&a.description);
        let verbatim = !desc.is_empty() && caption_nfc.contains(desc.as_str());
        if !verbatim {
            push(
                rules::VERBATIM_DESCRIPTION,
                Severity::Hard,
                format!("attribute {i}: {:?} is not a substring of the caption", a.description),
            );
        }
        let mut evidence_verbatim = true;
        for e in &a.evidence {
            if !evidence_is_verbatim(&caption_nfc, e) {
                evidence_verbatim = false;
                push(
                    rules::VERBATIM_EVIDENCE,
                    Severity::Hard,
                    format!("attribute {i}: evidence {e:?} is not a substring of the caption"),
                );
            }
        }
        let confidence_in_range = a.confidence.is_finite() && (0.0..=1.0).contains(&a.confidence);
        if !confidence_in_range {
            push(
                rules::CONFIDENCE_RANGE,
                Severity::Hard,
                format!("attribute {i}: confidence {} outside [0, 1]", a.confidence),
            );
        }
        let known_aspect = is_known_aspect(&a.aspect);
        if !known_aspect {
            push(
                rules::UNKNOWN_ASPECT,
                Severity::Soft,
                format!("attribute {i}: aspect {:?} is outside the taxonomy", a.aspect),
            );
        }
        flags.push(AttributeFlags {
            verbatim,
            evidence_verbatim,
            confidence_in_range,
            known_aspect,
        });
    }
    if !result.attributes.is_empty() && !result.attributes.iter().any(|a| a.aspect == "category") {
        push(rules::MISSING_CATEGORY, Severity::Soft, "no category attribute".into());
    }
    if result.attributes.len() > a_max {
        push(
            rules::OVER_LIMIT,
            Severity::Soft,
            format!("{} attributes exceed the limit of {a_max}", result.attributes.len()),
        );
    }
    let verdict = if violations.iter().any(|v| v.severity == Severity::Hard) {
        Verdict::Reject
    } else {
        Verdict::Accept
    };
    ValidationReport {
        verdict,
        violations,
        attribute_flags: flags,
    }
}

/// Keeps at most `a_max` attributes: the first `category` attribute goes
/// first, the rest follow in their original order.
pub fn truncate_attributes(mut result: DecompositionResult, a_max: usize) -> DecompositionResult {
    if result.attributes.len() <= a_max {
        return result;
    }
    let mut attrs = std::mem::take(&mut result.attributes);
    let mut kept = Vec::with_capacity(a_max);
    if let Some(pos) = attrs.iter().position(|a| a.aspect == "category") {
        kept.push(attrs.remove(pos));
    }
    kept.extend(attrs.into_iter().take(a_max.saturating_sub(kept.len())));
    kept.truncate(a_max);
    result.attributes = kept;
    result
}
