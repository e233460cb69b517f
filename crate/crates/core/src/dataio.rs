//! Gold dataset loaders and persistence of predictions, configs, and run
//! summaries.
//!
//! Two dataset formats are supported: token-per-line BIO files and a JSON
//! document with character-offset entities. BIO sentences are rebuilt by
//! joining tokens with single spaces, and all offsets refer to that text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::pipeline::SentenceResult;
use crate::types::{EnsembleConfig, EntityRef, EntityTypeSchema, Sentence, Span, TypeEntry};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed BIO line {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("line {line}: unknown tag {tag:?}")]
    UnknownTag { line: usize, tag: String },
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

/// A labeled dataset with train/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldDataset {
    pub dataset_id: String,
    pub schema: EntityTypeSchema,
    pub sentences: Vec<Sentence>,
    pub gold: Vec<EntityRef>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl GoldDataset {
    /// Builds a dataset and checks every invariant.
    pub fn new(
        schema: EntityTypeSchema,
        sentences: Vec<Sentence>,
        gold: Vec<EntityRef>,
        splits: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, DataError> {
        let dataset = Self {
            dataset_id: schema.dataset_id().to_string(),
            schema,
            sentences,
            gold,
            splits,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    fn validate(&self) -> Result<(), DataError> {
        let mut by_id: BTreeMap<&str, &Sentence> = BTreeMap::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if s.text.is_empty() {
                return Err(violation(format!("$.sentences[{i}].text"), "empty sentence"));
            }
            if by_id.insert(&s.id, s).is_some() {
                return Err(violation(format!("$.sentences[{i}].id"), format!("duplicate id {:?}", s.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.gold.iter().enumerate() {
            let sentence = by_id
                .get(e.sentence_id.as_str())
                .ok_or_else(|| violation(format!("gold[{i}]"), format!("unknown sentence {:?}", e.sentence_id)))?;
            if !sentence.contains_span(e.span) {
                return Err(violation(
                    format!("gold[{i}]"),
                    format!("span {} outside sentence of length {}", e.span, sentence.char_len()),
                ));
            }
            if !self.schema.contains(&e.label) {
                return Err(violation(format!("gold[{i}]"), format!("label {:?} not in schema", e.label)));
            }
            if !seen.insert(e) {
                return Err(violation(format!("gold[{i}]"), "duplicate entity"));
            }
        }
        let mut assigned: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if !by_id.contains_key(id.as_str()) {
                    return Err(violation(format!("$.splits.{split}"), format!("unknown sentence {id:?}")));
                }
                if let Some(other) = assigned.insert(id, split) {
                    return Err(violation(
                        format!("$.splits.{split}"),
                        format!("sentence {id:?} also in split {other:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Sentences of a named split, or all sentences when the dataset has no
    /// such split.
    pub fn split_sentences(&self, split: &str) -> Vec<Sentence> {
        match self.splits.get(split) {
            Some(ids) => {
                let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                self.sentences.iter().filter(|s| wanted.contains(s.id.as_str())).cloned().collect()
            }
            None => self.sentences.clone(),
        }
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.contains_key(split)
    }

    /// Restriction to the given sentences (gold filtered accordingly).
    pub fn subset(&self, sentences: Vec<Sentence>) -> GoldDataset {
        let ids: BTreeSet<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
        let gold = self.gold.iter().filter(|e| ids.contains(e.sentence_id.as_str())).cloned().collect();
        let splits = self
            .splits
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().filter(|id| ids.contains(id.as_str())).cloned().collect()))
            .collect();
        GoldDataset {
            dataset_id: self.dataset_id.clone(),
            schema: self.schema.clone(),
            sentences,
            gold,
            splits,
        }
    }

    pub fn gold_for(&self, sentence_ids: &BTreeSet<&str>) -> Vec<EntityRef> {
        self.gold
            .iter()
            .filter(|e| sentence_ids.contains(e.sentence_id.as_str()))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioWarning {
    pub line: usize,
    pub message: String,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, label) = tag.split_once('-')?;
    if label.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(label)),
        "I" => Some(Tag::Inside(label)),
        _ => None,
    }
}

/// Sentences, gold entities, and repair warnings from one BIO file.
pub type ParsedBio = (Vec<Sentence>, Vec<EntityRef>, Vec<BioWarning>);

/// Parses BIO text: one `token<TAB>tag` per line (any whitespace before the
/// tag is accepted), blank lines between sentences. Sentence ids are
/// `<prefix><n>` with `n` counting from 1.
pub fn parse_bio(
    input: &str,
    schema: &EntityTypeSchema,
    id_prefix: &str,
) -> Result<ParsedBio, DataError> {
    let mut sentences = Vec::new();
    let mut gold = Vec::new();
    let mut warnings = Vec::new();

    let mut tokens: Vec<&str> = Vec::new();
    // (start char, label) of the open entity; end is tracked by `cursor`.
    let mut open: Option<(usize, String)> = None;
    let mut cursor = 0usize;
    let mut pending: Vec<(Span, String)> = Vec::new();

    let mut flush = |tokens: &mut Vec<&str>,
                     open: &mut Option<(usize, String)>,
                     cursor: &mut usize,
                     pending: &mut Vec<(Span, String)>| {
        if let Some((start, label)) = open.take() {
            pending.push((Span::new(start, *cursor), label));
        }
        if !tokens.is_empty() {
            let id = format!("{id_prefix}{}", sentences.len() + 1);
            for (span, label) in pending.drain(..) {
                gold.push(EntityRef::new(id.clone(), span, label));
            }
            sentences.push(Sentence::new(id, tokens.join(" ")));
        }
        tokens.clear();
        pending.clear();
        *cursor = 0;
    };

    for (index, raw_line) in input.lines().enumerate() {
        let line_no = index + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut open, &mut cursor, &mut pending);
            continue;
        }
        let (token, tag) = line
            .trim_end()
            .rsplit_once(['\t', ' '])
            .map(|(t, g)| (t.trim_end(), g))
            .filter(|(t, g)| !t.is_empty() && !g.is_empty() && !t.chars().any(char::is_whitespace))
            .ok_or_else(|| DataError::MalformedLine {
                line: line_no,
                content: line.to_string(),
            })?;
        let parsed = parse_tag(tag).ok_or_else(|| DataError::UnknownTag {
            line: line_no,
            tag: tag.to_string(),
        })?;
        let start = if tokens.is_empty() { 0 } else { cursor + 1 };
        let end = start + token.chars().count();

        let canonical = |label: &str| {
            schema
                .normalize_label(label)
                .map(str::to_string)
                .map_err(|_| DataError::UnknownTag {
                    line: line_no,
                    tag: tag.to_string(),
                })
        };
        match parsed {
            Tag::Outside => {
                if let Some((s, label)) = open.take() {
                    pending.push((Span::new(s, cursor), label));
                }
            }
            Tag::Begin(label) => {
                let label = canonical(label)?;
                if let Some((s, prev)) = open.take() {
                    pending.push((Span::new(s, cursor), prev));
                }
                open = Some((start, label));
            }
            Tag::Inside(label) => {
                let label = canonical(label)?;
                let continues = matches!(&open, Some((_, prev)) if *prev == label);
                if !continues {
                    warnings.push(BioWarning {
                        line: line_no,
                        message: format!("I-{label} without a preceding B-{label}; treated as B-{label}"),
                    });
                    if let Some((s, prev)) = open.take() {
                        pending.push((Span::new(s, cursor), prev));
                    }
                    open = Some((start, label));
                }
            }
        }
        tokens.push(token);
        cursor = end;
    }
    flush(&mut tokens, &mut open, &mut cursor, &mut pending);
    Ok((sentences, gold, warnings))
}

/// Loads a single BIO file; all sentences are unsplit.
pub fn load_bio(path: &Path, schema: &EntityTypeSchema) -> Result<GoldDataset, DataError> {
    let input = fs::read_to_string(path).map_err(io_err(path))?;
    let (sentences, gold, warnings) = parse_bio(&input, schema, "s")?;
    for w in &warnings {
        log::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    GoldDataset::new(schema.clone(), sentences, gold, BTreeMap::new())
}

/// Loads BIO files for named splits; ids become `<split>-<n>`.
pub fn load_bio_splits(files: &[(&str, &Path)], schema: &EntityTypeSchema) -> Result<GoldDataset, DataError> {
    let mut sentences = Vec::new();
    let mut gold = Vec::new();
    let mut splits = BTreeMap::new();
    for (split, path) in files {
        let input = fs::read_to_string(path).map_err(io_err(path))?;
        let (s, g, warnings) = parse_bio(&input, schema, &format!("{split}-"))?;
        for w in &warnings {
            log::warn!("{}:{}: {}", path.display(), w.line, w.message);
        }
        splits.insert(split.to_string(), s.iter().map(|x| x.id.clone()).collect());
        sentences.extend(s);
        gold.extend(g);
    }
    GoldDataset::new(schema.clone(), sentences, gold, splits)
}

/// Renders sentences and gold back to BIO. Tokens are the single-space
/// separated pieces of each sentence.
pub fn to_bio(sentences: &[Sentence], gold: &[EntityRef]) -> String {
    let mut out = String::new();
    for sentence in sentences {
        let mut entities: Vec<&EntityRef> = gold.iter().filter(|e| e.sentence_id == sentence.id).collect();
        entities.sort();
        let mut offset = 0;
        for token in sentence.text.split(' ') {
            let start = offset;
            offset += token.chars().count() + 1;
            let tag = entities
                .iter()
                .find(|e| e.span.start <= start && start < e.span.end)
                .map(|e| {
                    let prefix = if e.span.start == start { "B" } else { "I" };
                    format!("{prefix}-{}", e.label)
                })
                .unwrap_or_else(|| "O".to_string());
            out.push_str(token);
            out.push('\t');
            out.push_str(&tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonEntity {
    start: usize,
    end: usize,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonSentence {
    id: String,
    text: String,
    #[serde(default)]
    entities: Vec<JsonEntity>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonDataset {
    dataset_id: String,
    schema: Vec<TypeEntry>,
    sentences: Vec<JsonSentence>,
    #[serde(default)]
    splits: BTreeMap<String, Vec<String>>,
}

fn parse_dataset_value(value: Value) -> Result<GoldDataset, DataError> {
    // Field-level checks first so violations carry a JSON path.
    let root = value.as_object().ok_or_else(|| violation("$", "expected an object"))?;
    for key in ["dataset_id", "schema", "sentences"] {
        if !root.contains_key(key) {
            return Err(violation(format!("$.{key}"), "missing field"));
        }
    }
    let raw: JsonDataset = serde_json::from_value(value).map_err(|e| violation("$", e.to_string()))?;
    let schema = EntityTypeSchema::new(raw.dataset_id, raw.schema).map_err(|e| violation("$.schema", e.to_string()))?;

    let mut sentences = Vec::with_capacity(raw.sentences.len());
    let mut gold = Vec::new();
    for (i, s) in raw.sentences.into_iter().enumerate() {
        let sentence = Sentence::new(s.id, s.text);
        let length = sentence.char_len();
        for (j, e) in s.entities.into_iter().enumerate() {
            let at = format!("$.sentences[{i}].entities[{j}]");
            if e.start >= e.end {
                return Err(violation(at, format!("start {} is not before end {}", e.start, e.end)));
            }
            if e.end > length {
                return Err(violation(format!("{at}.end"), format!("{} exceeds text length {length}", e.end)));
            }
            let label = schema
                .normalize_label(&e.label)
                .map_err(|_| violation(format!("{at}.label"), format!("{:?} not in schema", e.label)))?
                .to_string();
            gold.push(EntityRef::new(sentence.id.clone(), Span::new(e.start, e.end), label));
        }
        sentences.push(sentence);
    }
    GoldDataset::new(schema, sentences, gold, raw.splits)
}

pub fn parse_json_dataset(input: &str) -> Result<GoldDataset, DataError> {
    let value: Value = serde_json::from_str(input).map_err(|e| violation("$", e.to_string()))?;
    parse_dataset_value(value)
}

pub fn load_json(path: &Path) -> Result<GoldDataset, DataError> {
    let input = fs::read_to_string(path).map_err(io_err(path))?;
    parse_json_dataset(&input)
}

pub fn dataset_to_json(dataset: &GoldDataset) -> String {
    let doc = JsonDataset {
        dataset_id: dataset.dataset_id.clone(),
        schema: dataset.schema.entries().to_vec(),
        sentences: dataset
            .sentences
            .iter()
            .map(|s| {
                let mut entities: Vec<&EntityRef> = dataset.gold.iter().filter(|e| e.sentence_id == s.id).collect();
                entities.sort();
                JsonSentence {
                    id: s.id.clone(),
                    text: s.text.clone(),
                    entities: entities
                        .into_iter()
                        .map(|e| JsonEntity {
                            start: e.span.start,
                            end: e.span.end,
                            label: e.label.clone(),
                        })
                        .collect(),
                }
            })
            .collect(),
        splits: dataset.splits.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("dataset serializes")
}

pub fn save_json(dataset: &GoldDataset, path: &Path) -> Result<(), DataError> {
    write_file(path, dataset_to_json(dataset).as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes one JSON document per line, one line per sentence.
pub fn save_predictions(results: &[SentenceResult], path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    for result in results {
        let line = serde_json::to_string(result).expect("results serialize");
        writeln!(writer, "{line}").map_err(io_err(path))?;
    }
    writer.flush().map_err(io_err(path))
}

pub fn load_predictions(path: &Path) -> Result<Vec<SentenceResult>, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut results = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str(&line).map_err(|source| DataError::Json {
            path: path.to_path_buf(),
            source,
        })?);
    }
    Ok(results)
}

pub fn save_config(config: &EnsembleConfig, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(config).expect("config serializes");
    write_file(path, json.as_bytes())
}

pub fn load_config(path: &Path) -> Result<EnsembleConfig, DataError> {
    let input = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&input).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_json_value<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    write_file(path, json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> EntityTypeSchema {
        EntityTypeSchema::new(
            "toy",
            vec![TypeEntry::new("LOC", "places"), TypeEntry::new("PER", "people")],
        )
        .unwrap()
    }

    #[test]
    fn bio_offsets() {
        let (sentences, gold, warnings) = parse_bio("Montes B-LOC\nClaros I-LOC\né O\n", &schema(), "s").unwrap();
        assert_eq!(sentences, vec![Sentence::new("s1", "Montes Claros é")]);
        assert_eq!(gold, vec![EntityRef::new("s1", Span::new(0, 13), "LOC")]);
        assert!(warnings.is_empty());
    }

    #[test]
    fn bio_all_outside_and_multiple_sentences() {
        let input = "Ele\tO\nfoi\tO\n\n\nAna\tB-PER\nfoi\tO\na\tO\nLisboa\tB-LOC\n";
        let (sentences, gold, _) = parse_bio(input, &schema(), "s").unwrap();
        assert_eq!(sentences.len(), 2);
        assert_eq!(
            gold,
            vec![
                EntityRef::new("s2", Span::new(0, 3), "PER"),
                EntityRef::new("s2", Span::new(10, 16), "LOC"),
            ]
        );
    }

    #[test]
    fn dangling_inside_is_coerced() {
        let (_, gold, warnings) = parse_bio("em O\nBelo I-LOC\nHorizonte I-LOC\n", &schema(), "s").unwrap();
        assert_eq!(gold, vec![EntityRef::new("s1", Span::new(3, 17), "LOC")]);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].line, 2);
        let (_, gold, warnings) = parse_bio("Ana B-PER\nLisboa I-LOC\n", &schema(), "s").unwrap();
        assert_eq!(gold.len(), 2);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn bio_errors() {
        assert!(matches!(
            parse_bio("lonely\n", &schema(), "s"),
            Err(DataError::MalformedLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_bio("Ana B-ORG\n", &schema(), "s"),
            Err(DataError::UnknownTag { line: 1, .. })
        ));
        assert!(matches!(
            parse_bio("Ana X-PER\n", &schema(), "s"),
            Err(DataError::UnknownTag { .. })
        ));
    }

    #[test]
    fn bio_round_trip() {
        let input = "Ana\tB-PER\nMaria\tI-PER\nvisitou\tO\nSão\tB-LOC\nPaulo\tI-LOC\nRio\tB-LOC\n\nnada\tO\n\n";
        let (sentences, gold, _) = parse_bio(input, &schema(), "s").unwrap();
        assert_eq!(to_bio(&sentences, &gold), input);
    }

    #[test]
    fn json_dataset_loads_and_checks_bounds() {
        let doc = r#"{
            "dataset_id": "toy",
            "schema": [{"label": "LOC", "description": "places"}],
            "sentences": [{"id": "a", "text": "Em Belém", "entities": [{"start": 3, "end": 8, "label": "loc"}]}],
            "splits": {"test": ["a"]}
        }"#;
        let dataset = parse_json_dataset(doc).unwrap();
        assert_eq!(dataset.gold, vec![EntityRef::new("a", Span::new(3, 8), "LOC")]);

        let bad = doc.replace("\"end\": 8", "\"end\": 9");
        match parse_json_dataset(&bad) {
            Err(DataError::SchemaViolation { path, .. }) => assert_eq!(path, "$.sentences[0].entities[0].end"),
            other => panic!("expected violation, got {other:?}"),
        }
        let overlapping_splits = doc.replace(r#"{"test": ["a"]}"#, r#"{"test": ["a"], "train": ["a"]}"#);
        assert!(matches!(
            parse_json_dataset(&overlapping_splits),
            Err(DataError::SchemaViolation { .. })
        ));
        let missing = r#"{"dataset_id": "x", "sentences": []}"#;
        match parse_json_dataset(missing) {
            Err(DataError::SchemaViolation { path, .. }) => assert_eq!(path, "$.schema"),
            other => panic!("expected violation, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trip_keeps_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = EnsembleConfig::single("m1", 1.0);
        config.provenance = Some(crate::types::Provenance {
            source_dataset: "harem".into(),
            dev_seed: 3,
        });
        let path = dir.path().join("nested/config.json");
        save_config(&config, &path).unwrap();
        assert_eq!(load_config(&path).unwrap(), config);
    }
}
