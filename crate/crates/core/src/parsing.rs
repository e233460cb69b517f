//! Turning raw model output into validated structures.
//!
//! Every leniency rule lives here: code fences and surrounding prose are
//! tolerated, malformed entities are dropped one at a time, and anything
//! unrecognizable in a vote or choice answer becomes `Invalid`.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::Value;
use thiserror::Error;

use crate::spans::resolve_span;
use crate::types::{EntityTypeSchema, MentionCandidate, Sentence, Span};

pub use crate::types::VoteAnswer;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON array found in model response")]
    NoJsonFound,
}

/// Why a single extracted entity was discarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    NotAnObject,
    MissingField(&'static str),
    UnknownLabel(String),
    NoMatch(String),
    Duplicate(String),
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::NotAnObject => f.write_str("array element is not an object"),
            Rejection::MissingField(field) => write!(f, "missing string field {field:?}"),
            Rejection::UnknownLabel(label) => write!(f, "type {label:?} not in schema"),
            Rejection::NoMatch(text) => write!(f, "{text:?} not found in sentence"),
            Rejection::Duplicate(text) => write!(f, "duplicate entity {text:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedExtraction {
    pub candidates: Vec<MentionCandidate>,
    pub rejected: Vec<Rejection>,
}

/// Parses an extraction answer and keeps the entities that carry a schema
/// label and anchor in the sentence.
pub fn parse_extraction_response(
    text: &str,
    schema: &EntityTypeSchema,
    sentence: &Sentence,
    model_id: &str,
) -> Result<Vec<MentionCandidate>, ParseError> {
    parse_extraction_detailed(text, schema, sentence, model_id).map(|p| p.candidates)
}

pub fn parse_extraction_detailed(
    text: &str,
    schema: &EntityTypeSchema,
    sentence: &Sentence,
    model_id: &str,
) -> Result<ParsedExtraction, ParseError> {
    let items = first_json_array(text).ok_or(ParseError::NoJsonFound)?;
    let mut parsed = ParsedExtraction::default();
    let mut seen: BTreeMap<(Span, String), ()> = BTreeMap::new();

    for item in items {
        let Some(obj) = item.as_object() else {
            parsed.rejected.push(Rejection::NotAnObject);
            continue;
        };
        let Some(mention) = obj.get("text").and_then(Value::as_str) else {
            parsed.rejected.push(Rejection::MissingField("text"));
            continue;
        };
        let Some(raw_label) = obj.get("type").and_then(Value::as_str) else {
            parsed.rejected.push(Rejection::MissingField("type"));
            continue;
        };
        let label = match schema.normalize_label(raw_label) {
            Ok(label) => label.to_string(),
            Err(_) => {
                parsed.rejected.push(Rejection::UnknownLabel(raw_label.to_string()));
                continue;
            }
        };
        let span = match resolve_span(mention, sentence) {
            Ok(span) => span,
            Err(_) => {
                parsed.rejected.push(Rejection::NoMatch(mention.to_string()));
                continue;
            }
        };
        if seen.insert((span, label.clone()), ()).is_some() {
            parsed.rejected.push(Rejection::Duplicate(mention.to_string()));
            continue;
        }
        parsed.candidates.push(MentionCandidate {
            sentence_id: sentence.id.clone(),
            text: mention.to_string(),
            label,
            span,
            extractors: BTreeSet::from([model_id.to_string()]),
            votes: BTreeMap::new(),
        });
    }
    Ok(parsed)
}

/// Finds the first balanced `[...]` region that parses as a JSON array.
fn first_json_array(text: &str) -> Option<Vec<Value>> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(offset) = text[from..].find('[') {
        let open = from + offset;
        if let Some(close) = matching_bracket(bytes, open) {
            if let Ok(Value::Array(items)) = serde_json::from_str::<Value>(&text[open..=close]) {
                return Some(items);
            }
        }
        from = open + 1;
    }
    None
}

// Bracket-depth scan from `open`, skipping over string literals.
fn matching_bracket(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'[' | b'{' => depth += 1,
            b']' | b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return (b == b']').then_some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Reads a yes/no verdict from the first alphabetic token.
pub fn parse_vote_response(text: &str) -> VoteAnswer {
    let token: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" | "sim" => VoteAnswer::Yes,
        "no" | "não" | "nao" => VoteAnswer::No,
        _ => VoteAnswer::Invalid,
    }
}

/// A model's pick in a multiple-choice prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ChoiceAnswer {
    Pick(usize),
    Invalid,
}

/// Maps the first standalone letter to an option index. `option_count`
/// includes the trailing N/A slot.
pub fn parse_choice_response(text: &str, option_count: usize) -> ChoiceAnswer {
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_alphabetic() {
            continue;
        }
        let before = i.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i + 1).copied();
        if before.is_some_and(char::is_alphanumeric) || after.is_some_and(char::is_alphanumeric) {
            continue;
        }
        let index = (c.to_ascii_uppercase() as u8 - b'A') as usize;
        return if index < option_count {
            ChoiceAnswer::Pick(index)
        } else {
            ChoiceAnswer::Invalid
        };
    }
    ChoiceAnswer::Invalid
}
