//! Exact-match micro precision, recall, and F1.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::types::{EntityRef, EvalReport, Scores};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("duplicate entity {0:?} in {1} list")]
    DuplicateEntity(EntityRef, &'static str),
}

/// Scores predictions against gold under exact (sentence, span, label)
/// equality. A correct span with the wrong label counts as both a false
/// positive and a false negative.
pub fn score(predicted: &[EntityRef], gold: &[EntityRef]) -> Result<EvalReport, MetricsError> {
    let predicted_set = unique(predicted, "predicted")?;
    let gold_set = unique(gold, "gold")?;

    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for entity in &predicted_set {
        let entry = counts.entry(entity.label.as_str()).or_default();
        if gold_set.contains(entity) {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    for entity in &gold_set {
        if !predicted_set.contains(entity) {
            counts.entry(entity.label.as_str()).or_default().2 += 1;
        }
    }

    let per_type: BTreeMap<String, Scores> = counts
        .iter()
        .map(|(label, &(tp, fp, fn_))| (label.to_string(), Scores::from_counts(tp, fp, fn_)))
        .collect();
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    Ok(EvalReport {
        micro: Scores::from_counts(tp, fp, fn_),
        per_type,
    })
}

fn unique<'a>(entities: &'a [EntityRef], which: &'static str) -> Result<HashSet<&'a EntityRef>, MetricsError> {
    let mut set = HashSet::with_capacity(entities.len());
    for entity in entities {
        if !set.insert(entity) {
            return Err(MetricsError::DuplicateEntity(entity.clone(), which));
        }
    }
    Ok(set)
}

/// Renders the report as an aligned text table.
pub fn render_table(report: &EvalReport) -> String {
    let labels: BTreeSet<&str> = report.per_type.keys().map(String::as_str).collect();
    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max("micro".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9}  {:>6}  {:>6}",
        "type", "tp", "fp", "fn", "precision", "recall", "f1"
    );
    let mut row = |name: &str, s: &Scores| {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9.4}  {:>6.4}  {:>6.4}",
            name, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
        );
    };
    for label in labels {
        row(label, &report.per_type[label]);
    }
    row("micro", &report.micro);
    out
}
