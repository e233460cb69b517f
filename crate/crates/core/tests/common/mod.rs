//! Shared fixtures for the integration tests: synthetic corpora with
//! injected overlaps, oracle mock scripts, and brute-force reference
//! implementations.

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use ner_ensemble::backend::{RuleSpec, ScriptSpec};
use ner_ensemble::prompting::option_lines;
use ner_ensemble::spans::{build_groups, enumerate_options, resolve_span, OverlapGroup};
use ner_ensemble::types::{EntityRef, EntityTypeSchema, MentionCandidate, Sentence, Span, TypeEntry};
use ner_ensemble::{Backend, EnsembleConfig, GoldDataset, MockScript};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LABELS: [&str; 3] = ["LOC", "ORG", "PER"];

pub fn schema(dataset_id: &str) -> EntityTypeSchema {
    EntityTypeSchema::new(
        dataset_id,
        vec![
            TypeEntry::new("LOC", "places such as cities, regions, and countries"),
            TypeEntry::new("ORG", "organizations such as companies and institutions"),
            TypeEntry::new("PER", "people, by name"),
        ],
    )
    .unwrap()
}

pub fn ids(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn config(extraction: &[&str], voting: &[&str], disambiguation: &[&str]) -> EnsembleConfig {
    EnsembleConfig {
        extraction_models: ids(extraction),
        voting_models: ids(voting),
        disambiguation_models: ids(disambiguation),
        extraction_temperatures: extraction.iter().map(|m| (m.to_string(), 0.0)).collect(),
        provenance: None,
    }
}

pub fn mention(sentence_id: &str, span: Span, label: &str) -> MentionCandidate {
    MentionCandidate {
        sentence_id: sentence_id.to_string(),
        text: format!("m{}_{}", span.start, span.end),
        label: label.to_string(),
        span,
        extractors: ids(&["m"]),
        votes: Default::default(),
    }
}

/// A labeled corpus plus, per sentence, the non-gold mentions that the
/// scripted extractors also report.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dataset: GoldDataset,
    pub distractors: BTreeMap<String, Vec<(String, String)>>,
}

impl Corpus {
    pub fn gold_mentions(&self, sentence: &Sentence) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .dataset
            .gold
            .iter()
            .filter(|e| e.sentence_id == sentence.id)
            .map(|e| (sentence.slice(e.span).unwrap().to_string(), e.label.clone()))
            .collect();
        out.sort();
        out
    }

    pub fn overlap_count(&self) -> usize {
        self.distractors.values().map(Vec::len).sum()
    }
}

/// Sentences of unique tokens. Entities are separated by at least two
/// plain tokens; with `inject` every entity may gain overlapping
/// distractors (relabeled copy, one-token extensions, one-token prefix),
/// and every sentence gets at least one.
pub fn synthetic_corpus(n: usize, seed: u64, inject: bool) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::new();
    let mut gold = Vec::new();
    let mut distractors = BTreeMap::new();
    for i in 0..n {
        let id = format!("s{i:03}");
        let mut tokens: Vec<String> = vec![format!("n{i}")];
        let mut entities: Vec<(usize, usize, &str)> = Vec::new();
        let count = rng.random_range(1..=3);
        for _ in 0..count {
            for _ in 0..rng.random_range(2..=3) {
                tokens.push(format!("w{}", tokens.len()));
            }
            let start = tokens.len();
            let width = rng.random_range(1..=3);
            for _ in 0..width {
                tokens.push(format!("E{}", tokens.len()));
            }
            entities.push((start, start + width, LABELS[rng.random_range(0..LABELS.len())]));
        }
        tokens.push(format!("w{}", tokens.len()));

        let text = tokens.join(" ");
        let sentence = Sentence::new(id.clone(), text);
        let phrase = |a: usize, b: usize| tokens[a..b].join(" ");
        let mut extra = Vec::new();
        for &(a, b, label) in &entities {
            let gold_text = phrase(a, b);
            let span = resolve_span(&gold_text, &sentence).unwrap();
            gold.push(EntityRef::new(id.clone(), span, label));
            if !inject {
                continue;
            }
            if rng.random_bool(0.4) {
                let other = LABELS.iter().find(|l| **l != label).unwrap();
                extra.push((gold_text.clone(), other.to_string()));
            }
            if rng.random_bool(0.4) {
                extra.push((phrase(a, b + 1), label.to_string()));
            }
            if rng.random_bool(0.3) {
                extra.push((phrase(a - 1, b), label.to_string()));
            }
            if b - a >= 2 && rng.random_bool(0.3) {
                extra.push((phrase(a, a + 1), label.to_string()));
            }
        }
        if inject && extra.is_empty() {
            let (a, b, label) = entities[0];
            extra.push((phrase(a, b + 1), label.to_string()));
        }
        if inject {
            distractors.insert(id.clone(), extra);
        }
        sentences.push(sentence);
    }
    let dataset = GoldDataset::new(schema("synthetic"), sentences, gold, BTreeMap::new()).unwrap();
    Corpus { dataset, distractors }
}

fn extraction_json(mentions: &[(String, String)]) -> String {
    let items: Vec<serde_json::Value> = mentions
        .iter()
        .map(|(text, label)| serde_json::json!({"text": text, "type": label}))
        .collect();
    serde_json::Value::Array(items).to_string()
}

fn candidates(sentence: &Sentence, mentions: &[(String, String)]) -> Vec<MentionCandidate> {
    let mut out: Vec<MentionCandidate> = mentions
        .iter()
        .map(|(text, label)| MentionCandidate {
            sentence_id: sentence.id.clone(),
            text: text.clone(),
            label: label.clone(),
            span: resolve_span(text, sentence).unwrap(),
            extractors: ids(&["m"]),
            votes: Default::default(),
        })
        .collect();
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out.dedup_by(|a, b| a.sort_key() == b.sort_key());
    out
}

/// Letter of the option equal to the gold entities inside `group`, or the
/// N/A letter when no offered option matches.
pub fn gold_letter(group: &OverlapGroup, gold: &[(String, String)]) -> char {
    let options = enumerate_options(group, 5, 16).unwrap();
    let members: BTreeSet<(String, String)> = group
        .members
        .iter()
        .map(|m| (m.text.clone(), m.label.clone()))
        .collect();
    let wanted: BTreeSet<(String, String)> = gold.iter().filter(|g| members.contains(*g)).cloned().collect();
    let index = options
        .iter()
        .position(|o| {
            o.mentions
                .iter()
                .map(|m| (m.text.clone(), m.label.clone()))
                .collect::<BTreeSet<_>>()
                == wanted
        })
        .unwrap_or(options.len());
    (b'A' + index as u8) as char
}

/// A model that knows the gold annotation. It extracts the gold mentions
/// plus the injected distractors; when `lenient` it accepts every mention
/// in the vote (so the overlaps reach disambiguation), otherwise only the
/// gold ones; and it picks the gold option in every overlap group.
pub fn oracle_spec(corpus: &Corpus, lenient: bool) -> ScriptSpec {
    let mut rules = Vec::new();
    for sentence in &corpus.dataset.sentences {
        let quoted = format!("Sentence: \"{}\"", sentence.text);
        let gold = corpus.gold_mentions(sentence);
        let mut reported = gold.clone();
        reported.extend(corpus.distractors.get(&sentence.id).cloned().unwrap_or_default());

        rules.push(RuleSpec {
            contains: vec!["List the entities".into(), quoted.clone()],
            prompt_sha256: None,
            temperature: None,
            response: extraction_json(&reported),
        });
        let accepted = if lenient { &reported } else { &gold };
        for (text, label) in accepted {
            rules.push(RuleSpec {
                contains: vec![
                    "Yes or No".into(),
                    quoted.clone(),
                    format!("Mention: \"{text}\""),
                    format!("Type: {label} ("),
                ],
                prompt_sha256: None,
                temperature: None,
                response: "Yes".into(),
            });
        }
        let surviving = candidates(sentence, accepted);
        for group in build_groups(&surviving).groups {
            let options = enumerate_options(&group, 5, 16).unwrap();
            rules.push(RuleSpec {
                contains: vec!["single letter".into(), quoted.clone(), option_lines(&options)],
                prompt_sha256: None,
                temperature: None,
                response: gold_letter(&group, &gold).to_string(),
            });
        }
    }
    // Unmatched vote prompts are rejections; nothing else should miss.
    rules.push(RuleSpec {
        contains: vec!["Yes or No".into()],
        prompt_sha256: None,
        temperature: None,
        response: "No".into(),
    });
    ScriptSpec {
        rules,
        default: "unscripted prompt".into(),
    }
}

pub fn oracle_backend(corpus: &Corpus, models: &[&str], lenient: bool) -> Backend {
    let spec = oracle_spec(corpus, lenient);
    let mut backend = Backend::in_memory().with_backoff(std::time::Duration::ZERO);
    for model in models {
        backend.register_mock(*model, MockScript::from(spec.clone())).unwrap();
    }
    backend
}

/// Deterministic pseudo-random answers that differ between models, for
/// tests that need disagreement without hand-written scripts.
pub fn noisy_script(corpus: &Corpus, salt: u64) -> MockScript {
    let mut per_sentence: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for sentence in &corpus.dataset.sentences {
        let mut reported = corpus.gold_mentions(sentence);
        reported.extend(corpus.distractors.get(&sentence.id).cloned().unwrap_or_default());
        per_sentence.insert(sentence.text.clone(), reported);
    }
    MockScript::responder(move |q| {
        let hash = fnv(q.prompt.as_bytes()) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        if q.prompt.contains("List the entities") {
            let text = quoted_sentence(&q.prompt).unwrap_or_default();
            let all = per_sentence.get(text).cloned().unwrap_or_default();
            let kept: Vec<(String, String)> = all
                .into_iter()
                .enumerate()
                .filter(|(i, _)| (hash >> (i % 60)) & 3 != 0)
                .map(|(_, m)| m)
                .collect();
            extraction_json(&kept)
        } else if q.prompt.contains("Yes or No") {
            ["Yes", "No", "Yes", "maybe"][(hash % 4) as usize].to_string()
        } else {
            ["A", "B", "C", "?"][(hash % 4) as usize].to_string()
        }
    })
}

pub fn quoted_sentence(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("Sentence: \"")?.strip_suffix('"'))
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Every non-empty pairwise non-overlapping subset of `members`, ranked
/// longest first, then earliest start, then label sequence, then spans.
pub fn brute_force_options(members: &[MentionCandidate]) -> Vec<Vec<(Span, String)>> {
    let n = members.len();
    assert!(n < 20, "brute force over {n} members");
    let mut subsets = Vec::new();
    for mask in 1u32..(1 << n) {
        let picked: Vec<&MentionCandidate> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &members[i]).collect();
        let independent = picked.iter().enumerate().all(|(i, a)| {
            picked[i + 1..]
                .iter()
                .all(|b| a.span.end <= b.span.start || b.span.end <= a.span.start)
        });
        if independent {
            let mut option: Vec<(Span, String)> = picked.iter().map(|m| (m.span, m.label.clone())).collect();
            option.sort();
            subsets.push(option);
        }
    }
    subsets.sort_by_key(|o| {
        let total: usize = o.iter().map(|(s, _)| s.end - s.start).sum();
        let first = o[0].0.start;
        let labels: Vec<String> = o.iter().map(|(_, l)| l.clone()).collect();
        let spans: Vec<Span> = o.iter().map(|(s, _)| *s).collect();
        (Reverse(total), first, labels, spans)
    });
    subsets
}

/// Connected components of the overlap graph by union-find, as sorted
/// lists of member indices.
pub fn union_find_components(members: &[MentionCandidate]) -> Vec<Vec<usize>> {
    let n = members.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    for i in 0..n {
        for j in i + 1..n {
            if members[i].span.overlaps(&members[j].span) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        components.entry(root).or_default().push(i);
    }
    components.into_values().collect()
}

/// Quadratic reference scorer: (tp, fp, fn).
pub fn naive_counts(predicted: &[EntityRef], gold: &[EntityRef]) -> (usize, usize, usize) {
    let tp = predicted.iter().filter(|p| gold.iter().any(|g| g == *p)).count();
    (tp, predicted.len() - tp, gold.len() - tp)
}

/// Random candidates on a short character line, unique by (span, label).
pub fn random_mentions(rng: &mut ChaCha8Rng, max: usize, width: usize) -> Vec<MentionCandidate> {
    let count = rng.random_range(0..=max);
    let mut out: Vec<MentionCandidate> = Vec::new();
    while out.len() < count {
        let start = rng.random_range(0..width - 1);
        let end = rng.random_range(start + 1..=(start + 8).min(width));
        let label = LABELS[rng.random_range(0..2)];
        let m = mention("s", Span::new(start, end), label);
        if !out.iter().any(|o| o.sort_key() == m.sort_key()) {
            out.push(m);
        }
    }
    out
}
