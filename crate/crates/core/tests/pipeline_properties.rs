mod common;

use common::{config, noisy_script, oracle_backend, schema, synthetic_corpus};
use ner_ensemble::metrics::score;
use ner_ensemble::parsing::parse_extraction_detailed;
use ner_ensemble::pipeline::GroupOutcome;
use ner_ensemble::types::Sentence;
use ner_ensemble::{AblationFlags, Backend, Pipeline, PromptSet};
use proptest::prelude::*;

fn noisy_backend(corpus: &common::Corpus, models: &[&str]) -> Backend {
    let mut backend = Backend::in_memory().with_backoff(std::time::Duration::ZERO);
    for (i, m) in models.iter().enumerate() {
        backend.register_mock(*m, noisy_script(corpus, i as u64 + 1)).unwrap();
    }
    backend
}

#[test]
fn final_entities_are_anchored_and_disjoint() {
    let corpus = synthetic_corpus(60, 21, true);
    let backend = noisy_backend(&corpus, &["a", "b", "c"]);
    let prompts = PromptSet::default();
    let pipeline = Pipeline::new(&backend, &corpus.dataset.schema, &prompts);
    for flags in [
        AblationFlags::default(),
        AblationFlags {
            skip_voting: true,
            simple_disambiguation: false,
        },
        AblationFlags {
            skip_voting: true,
            simple_disambiguation: true,
        },
    ] {
        let output = pipeline
            .run_pipeline(&config(&["a", "b", "c"], &["a", "b", "c"], &["a", "b", "c"]), &corpus.dataset.sentences, flags)
            .unwrap();
        for (result, sentence) in output.results.iter().zip(&corpus.dataset.sentences) {
            assert_eq!(result.sentence_id, sentence.id);
            for (i, a) in result.final_entities.iter().enumerate() {
                assert!(a.is_anchored(sentence, &corpus.dataset.schema), "{a:?}");
                for b in &result.final_entities[i + 1..] {
                    assert!(!a.span.overlaps(&b.span), "{a:?} overlaps {b:?}");
                }
            }
        }
    }
}

#[test]
fn oracle_models_score_perfectly_with_strict_votes() {
    let corpus = synthetic_corpus(30, 5, true);
    let backend = oracle_backend(&corpus, &["a", "b", "c"], false);
    let prompts = PromptSet::default();
    let pipeline = Pipeline::new(&backend, &corpus.dataset.schema, &prompts);
    let output = pipeline
        .run_pipeline(&config(&["a"], &["a", "b", "c"], &["b"]), &corpus.dataset.sentences, Default::default())
        .unwrap();
    let report = score(&output.predictions(), &corpus.dataset.gold).unwrap();
    assert_eq!(report.f1(), 1.0);
    // Votes filtered every distractor, so nothing reached disambiguation.
    assert!(output.results.iter().all(|r| r.stage_trace.groups.is_empty()));
}

#[test]
fn lenient_votes_leave_groups_for_the_panel() {
    let corpus = synthetic_corpus(30, 5, true);
    let backend = oracle_backend(&corpus, &["a", "b", "c"], true);
    let prompts = PromptSet::default();
    let pipeline = Pipeline::new(&backend, &corpus.dataset.schema, &prompts);
    let output = pipeline
        .run_pipeline(&config(&["a"], &["a"], &["a", "b", "c"]), &corpus.dataset.sentences, Default::default())
        .unwrap();
    let groups: Vec<_> = output.results.iter().flat_map(|r| &r.stage_trace.groups).collect();
    assert!(!groups.is_empty());
    assert!(groups.iter().all(|g| matches!(g.outcome, GroupOutcome::Voted(_))));
    assert_eq!(score(&output.predictions(), &corpus.dataset.gold).unwrap().f1(), 1.0);
}

proptest! {
    #[test]
    fn parsed_candidates_are_always_anchored(
        words in prop::collection::vec("[A-Za-zçã]{1,7}", 1..10),
        response in ".{0,200}",
        picks in prop::collection::vec((0usize..10, 1usize..4, "LOC|ORG|PER|loc|MISC"), 0..6),
    ) {
        let sentence = Sentence::new("s", words.join(" "));
        let schema = schema("p");
        let listed: Vec<serde_json::Value> = picks
            .iter()
            .map(|(start, len, label)| {
                let start = start % words.len();
                let end = (start + len).min(words.len());
                serde_json::json!({"text": words[start..end].join(" "), "type": label})
            })
            .collect();
        for text in [response.clone(), format!("Sure! {} done", serde_json::Value::Array(listed))] {
            if let Ok(parsed) = parse_extraction_detailed(&text, &schema, &sentence, "m") {
                for c in &parsed.candidates {
                    prop_assert!(c.is_anchored(&sentence, &schema));
                }
            }
        }
    }
}
