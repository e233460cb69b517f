//! Domain types shared by every pipeline stage.
//!
//! Spans are half-open intervals of Unicode scalar values (`char`s), not
//! bytes, so that offsets stay meaningful for accented Portuguese text and
//! survive serialization to other languages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a registered chat-completion model.
pub type ModelId = String;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no entity types")]
    Empty,
    #[error("duplicate label {0:?} (labels are compared case-insensitively)")]
    DuplicateLabel(String),
    #[error("label must not be blank")]
    BlankLabel,
    #[error("label {0:?} has an empty description")]
    EmptyDescription(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown entity label {0:?}")]
pub struct UnknownLabel(pub String);

/// One entity type of a dataset with the description embedded in prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeEntry {
    pub label: String,
    pub description: String,
}

impl TypeEntry {
    pub fn new(label: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            description: description.into(),
        }
    }
}

fn fold(label: &str) -> String {
    label.trim().to_lowercase()
}

/// The label inventory of a dataset. Entry order is significant: prompts
/// list types in this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntityTypeSchema {
    dataset_id: String,
    entries: Vec<TypeEntry>,
}

impl EntityTypeSchema {
    pub fn new(dataset_id: impl Into<String>, entries: Vec<TypeEntry>) -> Result<Self, SchemaError> {
        if entries.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut seen = BTreeSet::new();
        for entry in &entries {
            let folded = fold(&entry.label);
            if folded.is_empty() {
                return Err(SchemaError::BlankLabel);
            }
            if entry.description.trim().is_empty() {
                return Err(SchemaError::EmptyDescription(entry.label.clone()));
            }
            if !seen.insert(folded) {
                return Err(SchemaError::DuplicateLabel(entry.label.clone()));
            }
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            entries,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn entries(&self) -> &[TypeEntry] {
        &self.entries
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    /// Maps a raw label onto the canonical schema label. Matching ignores
    /// case and surrounding whitespace and nothing else.
    pub fn normalize_label(&self, raw: &str) -> Result<&str, UnknownLabel> {
        let folded = fold(raw);
        self.entries
            .iter()
            .find(|e| fold(&e.label) == folded)
            .map(|e| e.label.as_str())
            .ok_or_else(|| UnknownLabel(raw.to_string()))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|e| e.label == label)
    }

    pub fn description(&self, label: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.label == label)
            .map(|e| e.description.as_str())
    }
}

impl<'de> Deserialize<'de> for EntityTypeSchema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            dataset_id: String,
            entries: Vec<TypeEntry>,
        }
        let raw = Raw::deserialize(deserializer)?;
        EntityTypeSchema::new(raw.dataset_id, raw.entries).map_err(serde::de::Error::custom)
    }
}

/// A half-open `[start, end)` interval of character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Byte offset of the character at `char_idx`, or the text length
    /// when `char_idx` equals the character count.
    pub fn byte_offset(&self, char_idx: usize) -> Option<usize> {
        if char_idx == 0 {
            return Some(0);
        }
        let mut indices = self.text.char_indices().map(|(b, _)| b).chain(std::iter::once(self.text.len()));
        indices.nth(char_idx)
    }

    /// Text covered by `span`, or `None` when the span is empty or out of
    /// bounds.
    pub fn slice(&self, span: Span) -> Option<&str> {
        if span.is_empty() {
            return None;
        }
        let start = self.byte_offset(span.start)?;
        let end = self.byte_offset(span.end)?;
        Some(&self.text[start..end])
    }

    pub fn contains_span(&self, span: Span) -> bool {
        !span.is_empty() && span.end <= self.char_len()
    }
}

/// A single model's verdict on whether a mention is correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteAnswer {
    Yes,
    No,
    Invalid,
}

/// A typed span extracted from a sentence, with the models that produced it
/// and the votes it received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionCandidate {
    pub sentence_id: String,
    pub text: String,
    pub label: String,
    pub span: Span,
    pub extractors: BTreeSet<ModelId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub votes: BTreeMap<ModelId, VoteAnswer>,
}

impl MentionCandidate {
    /// Ordering key used everywhere candidates need a canonical order.
    pub fn sort_key(&self) -> (Span, &str) {
        (self.span, self.label.as_str())
    }

    /// Checks the anchoring invariants against the owning sentence and schema.
    pub fn is_anchored(&self, sentence: &Sentence, schema: &EntityTypeSchema) -> bool {
        self.sentence_id == sentence.id
            && sentence.slice(self.span) == Some(self.text.as_str())
            && schema.contains(&self.label)
            && !self.extractors.is_empty()
    }
}

/// A `(sentence, span, label)` triple, the unit of exact-match scoring.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub sentence_id: String,
    pub span: Span,
    pub label: String,
}

impl EntityRef {
    pub fn new(sentence_id: impl Into<String>, span: Span, label: impl Into<String>) -> Self {
        Self {
            sentence_id: sentence_id.into(),
            span,
            label: label.into(),
        }
    }
}

impl From<&MentionCandidate> for EntityRef {
    fn from(m: &MentionCandidate) -> Self {
        EntityRef::new(m.sentence_id.clone(), m.span, m.label.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extraction,
    Voting,
    Disambiguation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Extraction => "extraction",
            Stage::Voting => "voting",
            Stage::Disambiguation => "disambiguation",
        })
    }
}

/// Where a configuration was selected, for reuse on other datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_dataset: String,
    pub dev_seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("extraction model set is empty")]
    EmptyExtractionSet,
    #[error("{0} panel must have an odd number of models")]
    EvenPanel(Stage),
    #[error("unknown model {0:?}")]
    UnknownModel(ModelId),
    #[error("missing extraction temperature for model {0:?}")]
    MissingTemperature(ModelId),
    #[error("invalid temperature {temperature} for model {model:?}")]
    InvalidTemperature { model: ModelId, temperature: f64 },
}

/// Assignment of models to the three pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    #[serde(rename = "extraction")]
    pub extraction_models: BTreeSet<ModelId>,
    #[serde(rename = "voting")]
    pub voting_models: BTreeSet<ModelId>,
    #[serde(rename = "disambiguation")]
    pub disambiguation_models: BTreeSet<ModelId>,
    #[serde(rename = "temperatures")]
    pub extraction_temperatures: BTreeMap<ModelId, f64>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

impl EnsembleConfig {
    /// The same single model in every stage.
    pub fn single(model: impl Into<ModelId>, temperature: f64) -> Self {
        let model = model.into();
        let set: BTreeSet<ModelId> = [model.clone()].into();
        Self {
            extraction_models: set.clone(),
            voting_models: set.clone(),
            disambiguation_models: set,
            extraction_temperatures: [(model, temperature)].into(),
            provenance: None,
        }
    }

    pub fn panel_size(&self) -> usize {
        self.extraction_models.len() + self.voting_models.len() + self.disambiguation_models.len()
    }

    pub fn models(&self) -> BTreeSet<&str> {
        self.extraction_models
            .iter()
            .chain(&self.voting_models)
            .chain(&self.disambiguation_models)
            .map(String::as_str)
            .collect()
    }

    pub fn temperature(&self, model: &str) -> Option<f64> {
        self.extraction_temperatures.get(model).copied()
    }

    /// Checks the configuration against the set of registered models.
    pub fn validate(&self, available: &BTreeSet<ModelId>) -> Result<(), ConfigError> {
        validate_config(self, available)
    }
}

pub fn validate_config(config: &EnsembleConfig, available: &BTreeSet<ModelId>) -> Result<(), ConfigError> {
    if config.extraction_models.is_empty() {
        return Err(ConfigError::EmptyExtractionSet);
    }
    if config.voting_models.len().is_multiple_of(2) {
        return Err(ConfigError::EvenPanel(Stage::Voting));
    }
    if config.disambiguation_models.len().is_multiple_of(2) {
        return Err(ConfigError::EvenPanel(Stage::Disambiguation));
    }
    if let Some(unknown) = config.models().into_iter().find(|m| !available.contains(*m)) {
        return Err(ConfigError::UnknownModel(unknown.to_string()));
    }
    for model in &config.extraction_models {
        match config.extraction_temperatures.get(model) {
            None => return Err(ConfigError::MissingTemperature(model.clone())),
            Some(&t) if !t.is_finite() || t < 0.0 => {
                return Err(ConfigError::InvalidTemperature {
                    model: model.clone(),
                    temperature: t,
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Precision, recall, and F1 with the raw counts they came from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    /// Derives the ratios from counts; zero denominators yield 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Micro-averaged scores plus a per-label breakdown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub micro: Scores,
    pub per_type: BTreeMap<String, Scores>,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.micro.f1
    }

    pub fn precision(&self) -> f64 {
        self.micro.precision
    }

    pub fn recall(&self) -> f64 {
        self.micro.recall
    }
}
