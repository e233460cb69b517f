mod common;

use std::collections::BTreeSet;

use common::{naive_counts, LABELS};
use ner_ensemble::metrics::score;
use ner_ensemble::types::{EntityRef, Span};
use proptest::prelude::*;

fn arb_entities() -> impl Strategy<Value = Vec<EntityRef>> {
    prop::collection::vec((0usize..3, 0usize..10, 1usize..4, 0usize..3), 0..15).prop_map(|raw| {
        let set: BTreeSet<EntityRef> = raw
            .into_iter()
            .map(|(s, start, w, l)| EntityRef::new(format!("s{s}"), Span::new(start, start + w), LABELS[l]))
            .collect();
        set.into_iter().collect()
    })
}

fn f1_of(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

proptest! {
    #[test]
    fn micro_counts_match_quadratic_matcher(predicted in arb_entities(), gold in arb_entities()) {
        let report = score(&predicted, &gold).unwrap();
        let (tp, fp, fn_) = naive_counts(&predicted, &gold);
        prop_assert_eq!((report.micro.tp, report.micro.fp, report.micro.fn_), (tp, fp, fn_));
        prop_assert!((report.f1() - f1_of(tp, fp, fn_)).abs() < 1e-12);
        let per_type_tp: usize = report.per_type.values().map(|s| s.tp).sum();
        prop_assert_eq!(per_type_tp, tp);
    }

    #[test]
    fn scoring_is_order_independent(mut predicted in arb_entities(), gold in arb_entities()) {
        let before = score(&predicted, &gold).unwrap();
        predicted.reverse();
        prop_assert_eq!(score(&predicted, &gold).unwrap(), before);
    }
}

#[test]
fn relabeled_span_is_one_false_positive_and_one_false_negative() {
    let predicted = vec![EntityRef::new("s", Span::new(0, 4), "ORG")];
    let gold = vec![EntityRef::new("s", Span::new(0, 4), "LOC")];
    let report = score(&predicted, &gold).unwrap();
    assert_eq!((report.micro.tp, report.micro.fp, report.micro.fn_), (0, 1, 1));
}
