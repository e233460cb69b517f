mod common;

use std::collections::BTreeMap;

use common::synthetic_corpus;
use ner_ensemble::dataio::{
    dataset_to_json, load_bio, load_bio_splits, load_config, load_json, load_predictions, parse_bio,
    parse_json_dataset, save_config, save_json, save_predictions, to_bio, DataError,
};
use ner_ensemble::types::Provenance;
use ner_ensemble::{AblationFlags, Pipeline, PromptSet};

#[test]
fn bio_round_trip_preserves_sentences_and_gold() {
    let corpus = synthetic_corpus(40, 7, false);
    let dataset = &corpus.dataset;
    let text = to_bio(&dataset.sentences, &dataset.gold);
    let (sentences, gold, warnings) = parse_bio(&text, &dataset.schema, "s").unwrap();
    assert!(warnings.is_empty());
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    let expected: Vec<&str> = dataset.sentences.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(texts, expected);
    // Ids are renumbered; compare spans and labels per sentence position.
    for (i, (ours, theirs)) in sentences.iter().zip(&dataset.sentences).enumerate() {
        let mut a: Vec<_> = gold.iter().filter(|e| e.sentence_id == ours.id).map(|e| (e.span, &e.label)).collect();
        let mut b: Vec<_> = dataset
            .gold
            .iter()
            .filter(|e| e.sentence_id == theirs.id)
            .map(|e| (e.span, &e.label))
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "sentence {i}");
    }
}

#[test]
fn bio_files_load_with_split_ids() {
    let corpus = synthetic_corpus(6, 3, false);
    let dataset = &corpus.dataset;
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = dataset.sentences.split_at(4);
    let train_path = dir.path().join("train.bio");
    let test_path = dir.path().join("test.bio");
    std::fs::write(&train_path, to_bio(train, &dataset.gold)).unwrap();
    std::fs::write(&test_path, to_bio(test, &dataset.gold)).unwrap();

    let loaded = load_bio_splits(&[("train", &train_path), ("test", &test_path)], &dataset.schema).unwrap();
    assert_eq!(loaded.sentences.len(), 6);
    assert_eq!(loaded.splits["train"].len(), 4);
    assert_eq!(loaded.splits["test"], vec!["test-1".to_string(), "test-2".to_string()]);
    assert_eq!(loaded.gold.len(), dataset.gold.len());

    let single = load_bio(&train_path, &dataset.schema).unwrap();
    assert_eq!(single.sentences[0].id, "s1");
}

#[test]
fn json_round_trip_is_exact() {
    let corpus = synthetic_corpus(25, 11, false);
    let mut dataset = corpus.dataset.clone();
    let ids: Vec<String> = dataset.sentences.iter().map(|s| s.id.clone()).collect();
    dataset.splits = BTreeMap::from([
        ("train".to_string(), ids[..20].to_vec()),
        ("test".to_string(), ids[20..].to_vec()),
    ]);
    let parsed = parse_json_dataset(&dataset_to_json(&dataset)).unwrap();
    let mut a = parsed.gold.clone();
    let mut b = dataset.gold.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    assert_eq!(parsed.sentences, dataset.sentences);
    assert_eq!(parsed.splits, dataset.splits);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/dataset.json");
    save_json(&dataset, &path).unwrap();
    assert_eq!(load_json(&path).unwrap().sentences, dataset.sentences);
}

#[test]
fn json_violations_name_the_offending_path() {
    let bad = r#"{
        "dataset_id": "d",
        "schema": [{"label": "LOC", "description": "places"}],
        "sentences": [{"id": "a", "text": "Rio", "entities": [{"start": 0, "end": 9, "label": "LOC"}]}]
    }"#;
    match parse_json_dataset(bad) {
        Err(DataError::SchemaViolation { path, .. }) => assert!(path.starts_with("$.sentences[0].entities[0]"), "{path}"),
        other => panic!("expected a schema violation, got {other:?}"),
    }
}

#[test]
fn predictions_and_configs_round_trip() {
    let corpus = synthetic_corpus(5, 2, true);
    let backend = common::oracle_backend(&corpus, &["a"], true);
    let prompts = PromptSet::default();
    let pipeline = Pipeline::new(&backend, &corpus.dataset.schema, &prompts);
    let mut config = common::config(&["a"], &["a"], &["a"]);
    let output = pipeline
        .run_pipeline(&config, &corpus.dataset.sentences, AblationFlags::default())
        .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let predictions = dir.path().join("predictions.jsonl");
    save_predictions(&output.results, &predictions).unwrap();
    assert_eq!(load_predictions(&predictions).unwrap(), output.results);

    config.provenance = Some(Provenance {
        source_dataset: "synthetic".into(),
        dev_seed: 9,
    });
    let path = dir.path().join("config.json");
    save_config(&config, &path).unwrap();
    assert_eq!(load_config(&path).unwrap(), config);
}
