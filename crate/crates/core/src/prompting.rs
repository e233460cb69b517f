//! Prompt templates and the three prompt builders.
//!
//! Templates are plain text with `{placeholder}` markers. Only the known
//! placeholder names are substituted; any other braces (JSON examples in
//! the instructions, for instance) are copied through untouched.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spans::DisambiguationOption;
use crate::types::{EntityTypeSchema, MentionCandidate, Sentence};

pub const DEFAULT_EXTRACTION_TEMPLATE: &str = include_str!("../templates/extraction.txt");
pub const DEFAULT_VOTE_TEMPLATE: &str = include_str!("../templates/vote.txt");
pub const DEFAULT_DISAMBIGUATION_TEMPLATE: &str = include_str!("../templates/disambiguation.txt");
pub const DEFAULT_TASK_DEFINITION: &str = include_str!("../templates/task_definition.txt");

/// Default upper bound on rendered prompt length, in characters.
pub const DEFAULT_MAX_PROMPT_CHARS: usize = 16_000;
/// The disambiguation prompt offers at most this many options before N/A.
pub const MAX_PROMPT_OPTIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Extraction,
    Vote,
    Disambiguation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Placeholder {
    TaskDefinition,
    TypeDescriptions,
    Sentence,
    Mention,
    Label,
    LabelDescription,
    Options,
}

impl Placeholder {
    const ALL: [Placeholder; 7] = [
        Placeholder::TaskDefinition,
        Placeholder::TypeDescriptions,
        Placeholder::Sentence,
        Placeholder::Mention,
        Placeholder::Label,
        Placeholder::LabelDescription,
        Placeholder::Options,
    ];

    fn name(self) -> &'static str {
        match self {
            Placeholder::TaskDefinition => "task_definition",
            Placeholder::TypeDescriptions => "type_descriptions",
            Placeholder::Sentence => "sentence",
            Placeholder::Mention => "mention",
            Placeholder::Label => "label",
            Placeholder::LabelDescription => "label_description",
            Placeholder::Options => "options",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl TemplateKind {
    fn required(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateKind::Extraction => &[TaskDefinition, TypeDescriptions, Sentence],
            TemplateKind::Vote => &[Sentence, Mention, Label, LabelDescription],
            TemplateKind::Disambiguation => &[Sentence, Options],
        }
    }

    fn optional(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateKind::Extraction => &[],
            TemplateKind::Vote => &[TaskDefinition, TypeDescriptions],
            TemplateKind::Disambiguation => &[TaskDefinition, TypeDescriptions],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("{kind:?} template is missing placeholder {{{name}}}")]
    MissingPlaceholder { kind: TemplateKind, name: &'static str },
    #[error("{kind:?} template uses placeholder {{{name}}} more than once")]
    DuplicatePlaceholder { kind: TemplateKind, name: &'static str },
    #[error("{kind:?} template does not accept placeholder {{{name}}}")]
    UnexpectedPlaceholder { kind: TemplateKind, name: &'static str },
    #[error("expected a {expected:?} template, got {actual:?}")]
    TemplateMismatch { expected: TemplateKind, actual: TemplateKind },
    #[error("too many options: {0} (at most 5 before N/A)")]
    TooManyOptions(usize),
    #[error("no options to render")]
    NoOptions,
    #[error("label {0:?} is not in the schema")]
    UnknownLabel(String),
    #[error("prompt is {length} characters, above the budget of {budget}")]
    TooLong { length: usize, budget: usize },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Placeholder),
}

/// A validated template of one kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        let pieces = split_pieces(&body);
        let mut used: Vec<Placeholder> = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(slot) => Some(*slot),
                Piece::Text(_) => None,
            })
            .collect();
        used.sort();
        for pair in used.windows(2) {
            if pair[0] == pair[1] {
                return Err(PromptError::DuplicatePlaceholder {
                    kind,
                    name: pair[0].name(),
                });
            }
        }
        for slot in &used {
            if !kind.required().contains(slot) && !kind.optional().contains(slot) {
                return Err(PromptError::UnexpectedPlaceholder { kind, name: slot.name() });
            }
        }
        if let Some(missing) = kind.required().iter().find(|p| !used.contains(p)) {
            return Err(PromptError::MissingPlaceholder {
                kind,
                name: missing.name(),
            });
        }
        Ok(Self { kind, body, pieces })
    }

    pub fn from_file(kind: TemplateKind, path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(kind, body)
    }

    pub fn default_for(kind: TemplateKind) -> Self {
        let body = match kind {
            TemplateKind::Extraction => DEFAULT_EXTRACTION_TEMPLATE,
            TemplateKind::Vote => DEFAULT_VOTE_TEMPLATE,
            TemplateKind::Disambiguation => DEFAULT_DISAMBIGUATION_TEMPLATE,
        };
        Self::new(kind, body).expect("bundled templates are valid")
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    fn expect_kind(&self, expected: TemplateKind) -> Result<(), PromptError> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(PromptError::TemplateMismatch {
                expected,
                actual: self.kind,
            })
        }
    }

    fn render(&self, values: &Values<'_>) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        for piece in &self.pieces {
            match piece {
                Piece::Text(text) => out.push_str(text),
                Piece::Slot(slot) => out.push_str(values.get(*slot)),
            }
        }
        out
    }
}

fn split_pieces(body: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut literal = String::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .and_then(|close| Placeholder::from_name(&after[..close]).map(|p| (p, close)));
        match slot {
            Some((placeholder, close)) => {
                if !literal.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Slot(placeholder));
                rest = &after[close + 1..];
            }
            None => {
                literal.push('{');
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        pieces.push(Piece::Text(literal));
    }
    pieces
}

#[derive(Default)]
struct Values<'a> {
    task_definition: &'a str,
    type_descriptions: String,
    sentence: &'a str,
    mention: &'a str,
    label: &'a str,
    label_description: &'a str,
    options: String,
}

impl Values<'_> {
    fn get(&self, slot: Placeholder) -> &str {
        match slot {
            Placeholder::TaskDefinition => self.task_definition,
            Placeholder::TypeDescriptions => &self.type_descriptions,
            Placeholder::Sentence => self.sentence,
            Placeholder::Mention => self.mention,
            Placeholder::Label => self.label,
            Placeholder::LabelDescription => self.label_description,
            Placeholder::Options => &self.options,
        }
    }
}

/// One `LABEL: description` line per schema entry, in schema order.
pub fn type_description_lines(schema: &EntityTypeSchema) -> String {
    schema
        .entries()
        .iter()
        .map(|e| format!("{}: {}", e.label, e.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_extraction_prompt(
    schema: &EntityTypeSchema,
    sentence: &Sentence,
    template: &PromptTemplate,
    task_definition: &str,
) -> Result<String, PromptError> {
    template.expect_kind(TemplateKind::Extraction)?;
    Ok(template.render(&Values {
        task_definition,
        type_descriptions: type_description_lines(schema),
        sentence: &sentence.text,
        ..Values::default()
    }))
}

pub fn build_vote_prompt(
    sentence: &Sentence,
    mention: &MentionCandidate,
    schema: &EntityTypeSchema,
    template: &PromptTemplate,
    task_definition: &str,
) -> Result<String, PromptError> {
    template.expect_kind(TemplateKind::Vote)?;
    let description = schema
        .description(&mention.label)
        .ok_or_else(|| PromptError::UnknownLabel(mention.label.clone()))?;
    Ok(template.render(&Values {
        task_definition,
        type_descriptions: type_description_lines(schema),
        sentence: &sentence.text,
        mention: &mention.text,
        label: &mention.label,
        label_description: description,
        ..Values::default()
    }))
}

/// Letter used for option `index` (`A` for 0).
pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

/// Renders the lettered option lines, N/A last.
pub fn option_lines(options: &[DisambiguationOption]) -> String {
    let mut out = String::new();
    for (i, option) in options.iter().enumerate() {
        let described: Vec<String> = option
            .mentions
            .iter()
            .map(|m| format!("{} ({})", m.text, m.label))
            .collect();
        let _ = writeln!(out, "{}) {}", option_letter(i), described.join("; "));
    }
    let _ = write!(out, "{}) N/A", option_letter(options.len()));
    out
}

pub fn build_disambiguation_prompt(
    sentence: &Sentence,
    options: &[DisambiguationOption],
    schema: &EntityTypeSchema,
    template: &PromptTemplate,
    task_definition: &str,
) -> Result<String, PromptError> {
    template.expect_kind(TemplateKind::Disambiguation)?;
    if options.is_empty() {
        return Err(PromptError::NoOptions);
    }
    if options.len() > MAX_PROMPT_OPTIONS {
        return Err(PromptError::TooManyOptions(options.len()));
    }
    Ok(template.render(&Values {
        task_definition,
        type_descriptions: type_description_lines(schema),
        sentence: &sentence.text,
        options: option_lines(options),
        ..Values::default()
    }))
}

/// The three templates plus shared settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub extraction: PromptTemplate,
    pub vote: PromptTemplate,
    pub disambiguation: PromptTemplate,
    pub task_definition: String,
    pub max_chars: usize,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            extraction: PromptTemplate::default_for(TemplateKind::Extraction),
            vote: PromptTemplate::default_for(TemplateKind::Vote),
            disambiguation: PromptTemplate::default_for(TemplateKind::Disambiguation),
            task_definition: DEFAULT_TASK_DEFINITION.trim().to_string(),
            max_chars: DEFAULT_MAX_PROMPT_CHARS,
        }
    }
}

impl PromptSet {
    fn budget(&self, prompt: String) -> Result<String, PromptError> {
        let length = prompt.chars().count();
        if length > self.max_chars {
            Err(PromptError::TooLong {
                length,
                budget: self.max_chars,
            })
        } else {
            Ok(prompt)
        }
    }

    pub fn extraction(&self, schema: &EntityTypeSchema, sentence: &Sentence) -> Result<String, PromptError> {
        self.budget(build_extraction_prompt(schema, sentence, &self.extraction, &self.task_definition)?)
    }

    pub fn vote(
        &self,
        schema: &EntityTypeSchema,
        sentence: &Sentence,
        mention: &MentionCandidate,
    ) -> Result<String, PromptError> {
        self.budget(build_vote_prompt(sentence, mention, schema, &self.vote, &self.task_definition)?)
    }

    pub fn disambiguation(
        &self,
        schema: &EntityTypeSchema,
        sentence: &Sentence,
        options: &[DisambiguationOption],
    ) -> Result<String, PromptError> {
        self.budget(build_disambiguation_prompt(
            sentence,
            options,
            schema,
            &self.disambiguation,
            &self.task_definition,
        )?)
    }
}
