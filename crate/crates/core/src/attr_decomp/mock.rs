//! Rule-based offline decomposer. Every attribute it emits is a span of the
//! (NFC-normalized) caption, so its output always passes validation.

use rand::Rng;
use unicode_normalization::UnicodeNormalization;

use super::{Attribute, DecompositionResult};
use crate::rng::{rng_from_seed, stable_hash};

const DETERMINERS: &[&str] = &["a", "an", "the", "this", "that", "these", "those", "one", "two", "three"];

const COLORS: &[&str] = &[
    "black", "white", "red", "green", "blue", "yellow", "gray", "grey", "silver", "orange",
    "brown", "purple", "pink", "beige", "golden", "cyan",
];

const SIZES: &[&str] = &["large", "small", "big", "tiny", "huge", "long", "short", "tall", "little", "medium"];

const PREPOSITIONS: &[&str] = &[
    "on", "in", "at", "near", "next", "beside", "behind", "above", "below", "under", "over", "to",
    "of", "with", "by", "from", "between", "along", "across", "around", "inside", "outside",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "parked", "driving", "moving", "located", "sitting", "standing",
    "facing", "turning", "waiting", "which", "and",
];

#[derive(Debug, Clone, Copy)]
struct Word {
    start: usize,
    end: usize,
}

fn words(text: &str, offset: usize) -> Vec<Word> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let is_word = c.is_alphanumeric() || c == '-' || c == '\'';
        match (is_word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Word {
                    start: offset + s,
                    end: offset + i,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Word {
            start: offset + s,
            end: offset + text.len(),
        });
    }
    out
}

fn in_list(list: &[&str], w: &str) -> bool {
    let lower = w.to_lowercase();
    list.contains(&lower.as_str())
}

fn trim_span(text: &str, start: usize, end: usize) -> Option<(usize, usize)> {
    let s = &text[start..end];
    let trimmed = s.trim_matches(|c: char| c.is_whitespace() || matches!(c, '.' | '!' | '?' | ',' | ';'));
    if trimmed.is_empty() {
        return None;
    }
    let lead = s.find(trimmed)?;
    Some((start + lead, start + lead + trimmed.len()))
}

/// Decomposes a caption with fixed lexical rules.
///
/// The first clause yields the category (first content-word run), color and
/// size words ahead of it, and the trailing phrase as `position` or `state`.
/// Each later comma- or semicolon-separated clause becomes a
/// `spatial_relation`. `seed` only perturbs the reported confidences.
pub fn mock_decompose(caption: &str, seed: u64) -> DecompositionResult {
    let text: String = caption.nfc().collect();
    let mut rng = rng_from_seed(stable_hash(text.as_bytes(), seed));
    let mut conf = move || 0.8 + 0.2 * rng.random::<f64>();
    let attr = |aspect: &str, s: usize, e: usize, c: f64| Attribute {
        aspect: aspect.to_string(),
        description: text[s..e].to_string(),
        evidence: Vec::new(),
        confidence: c,
    };

    let mut clauses = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == ',' || c == ';' {
            clauses.push((start, i));
            start = i + c.len_utf8();
        }
    }
    clauses.push((start, text.len()));

    let mut attributes = Vec::new();
    let mut primary_target = String::new();
    let (c0s, c0e) = clauses[0];
    let ws = words(&text[c0s..c0e], c0s);

    let boundary = ws
        .iter()
        .position(|w| {
            let t = &text[w.start..w.end];
            in_list(PREPOSITIONS, t) || in_list(VERBS, t)
        })
        .unwrap_or(ws.len());
    let head = &ws[..boundary];
    let mut modifiers = Vec::new();
    let mut cat_start = None;
    for (i, w) in head.iter().enumerate() {
        let t = &text[w.start..w.end];
        if in_list(COLORS, t) {
            modifiers.push(("color", *w));
        } else if in_list(SIZES, t) {
            modifiers.push(("size", *w));
        } else if in_list(DETERMINERS, t) {
            continue;
        } else if cat_start.is_none() {
            cat_start = Some(i);
        }
    }
    let category = cat_start.map(|i| {
        // The run ends at the last non-modifier word of the head.
        let last = head[i..]
            .iter()
            .rposition(|w| {
                let t = &text[w.start..w.end];
                !in_list(COLORS, t) && !in_list(SIZES, t) && !in_list(DETERMINERS, t)
            })
            .map_or(i, |r| i + r);
        (head[i].start, head[last].end)
    });
    let category = category
        .or_else(|| ws.first().map(|w| (w.start, w.end)))
        .or_else(|| trim_span(&text, 0, text.len()))
        .or_else(|| (!text.is_empty()).then_some((0, text.len())));

    if let Some((s, e)) = category {
        primary_target = text[s..e].to_string();
        attributes.push(attr("category", s, e, 1.0));
    }
    for (aspect, w) in modifiers {
        attributes.push(attr(aspect, w.start, w.end, conf()));
    }
    if boundary < ws.len() {
        let first = &text[ws[boundary].start..ws[boundary].end];
        let aspect = if in_list(PREPOSITIONS, first) { "position" } else { "state" };
        if let Some((s, e)) = trim_span(&text, ws[boundary].start, c0e) {
            attributes.push(attr(aspect, s, e, conf()));
        }
    }
    for &(s, e) in &clauses[1..] {
        if let Some((s, e)) = trim_span(&text, s, e) {
            attributes.push(attr("spatial_relation", s, e, conf()));
        }
    }
    DecompositionResult {
        analysis: format!("rule-based decomposition; target is {primary_target:?}"),
        primary_target,
        attributes,
    }
}
