//! Ensemble configuration search on a small labeled sample.
//!
//! Every configuration shares the backend cache, so the search only pays
//! for each distinct (model, prompt) atom once no matter how many
//! configurations reuse it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::GoldDataset;
use crate::metrics::{score, MetricsError};
use crate::pipeline::{AblationFlags, Pipeline, PipelineError, RunOutput};
use crate::types::{ConfigError, EnsembleConfig, EvalReport, ModelId};

pub const DEFAULT_DEV_SIZE: usize = 100;
pub const DEFAULT_TEMPERATURE_GRID: [f64; 4] = [0.0, 0.5, 1.0, 1.5];
/// Above this many models the configuration space is too large to list.
pub const MAX_SEARCH_MODELS: usize = 12;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("dataset has no sentences")]
    EmptyDataset,
    #[error("dev sample size must be at least 1")]
    ZeroSampleSize,
    #[error("no configurations to evaluate")]
    NoConfigs,
    #[error("temperature grid is empty")]
    EmptyGrid,
    #[error("cannot enumerate configurations over {0} models (limit {MAX_SEARCH_MODELS})")]
    TooManyModels(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

/// Uniform sample without replacement of `min(n, |dataset|)` sentences,
/// kept in dataset order.
pub fn sample_dev_set(dataset: &GoldDataset, n: usize, seed: u64) -> Result<GoldDataset, SearchError> {
    if n == 0 {
        return Err(SearchError::ZeroSampleSize);
    }
    let total = dataset.sentences.len();
    if total == 0 {
        return Err(SearchError::EmptyDataset);
    }
    if n >= total {
        return Ok(dataset.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, n).into_vec();
    picked.sort_unstable();
    let sentences = picked.into_iter().map(|i| dataset.sentences[i].clone()).collect();
    Ok(dataset.subset(sentences))
}

fn subset_of(models: &[&ModelId], mask: u32) -> BTreeSet<ModelId> {
    models
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, m)| (*m).clone())
        .collect()
}

/// Every (non-empty extraction set) x (odd voting set) x (odd
/// disambiguation set), ordered by subset bitmask over the sorted model
/// ids with extraction as the outermost loop.
pub fn enumerate_configs(
    models: &BTreeSet<ModelId>,
    temperatures: &BTreeMap<ModelId, f64>,
) -> Result<Vec<EnsembleConfig>, SearchError> {
    if models.len() > MAX_SEARCH_MODELS {
        return Err(SearchError::TooManyModels(models.len()));
    }
    if let Some(missing) = models.iter().find(|m| !temperatures.contains_key(*m)) {
        return Err(ConfigError::MissingTemperature(missing.clone()).into());
    }
    let sorted: Vec<&ModelId> = models.iter().collect();
    let full = 1u32 << sorted.len();
    let odd: Vec<u32> = (1..full).filter(|m| m.count_ones() % 2 == 1).collect();

    let panels: Vec<BTreeSet<ModelId>> = odd.iter().map(|&mask| subset_of(&sorted, mask)).collect();

    let mut configs = Vec::with_capacity((full as usize).saturating_sub(1) * odd.len() * odd.len());
    for extraction in 1..full {
        let extraction_models = subset_of(&sorted, extraction);
        let extraction_temperatures: BTreeMap<ModelId, f64> = extraction_models
            .iter()
            .map(|m| (m.clone(), temperatures[m]))
            .collect();
        for voting in &panels {
            for disambiguation in &panels {
                configs.push(EnsembleConfig {
                    extraction_models: extraction_models.clone(),
                    voting_models: voting.clone(),
                    disambiguation_models: disambiguation.clone(),
                    extraction_temperatures: extraction_temperatures.clone(),
                    provenance: None,
                });
            }
        }
    }
    Ok(configs)
}

/// Scores of one configuration on the dev sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResultRow {
    /// Position in the canonical configuration order.
    pub index: usize,
    pub config: EnsembleConfig,
    pub report: EvalReport,
    pub wall_time_ms: u128,
    pub cache_hit_rate: f64,
    /// Sentences excluded from scoring because of backend failures.
    pub failed_sentences: usize,
}

impl SearchResultRow {
    pub fn dev_f1(&self) -> f64 {
        self.report.f1()
    }

    pub fn dev_precision(&self) -> f64 {
        self.report.precision()
    }

    pub fn dev_recall(&self) -> f64 {
        self.report.recall()
    }
}

/// Best-first order: higher F1, then higher precision, then fewer panel
/// members in total, then canonical index.
pub fn compare_rows(a: &SearchResultRow, b: &SearchResultRow) -> Ordering {
    b.dev_f1()
        .total_cmp(&a.dev_f1())
        .then_with(|| b.dev_precision().total_cmp(&a.dev_precision()))
        .then_with(|| a.config.panel_size().cmp(&b.config.panel_size()))
        .then_with(|| a.index.cmp(&b.index))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub output: RunOutput,
    pub report: EvalReport,
}

/// Runs one configuration and scores it on the sentences that completed.
pub fn evaluate(
    pipeline: &Pipeline<'_>,
    config: &EnsembleConfig,
    dataset: &GoldDataset,
    flags: AblationFlags,
) -> Result<Evaluation, SearchError> {
    let output = pipeline.run_pipeline(config, &dataset.sentences, flags)?;
    let completed: BTreeSet<&str> = output
        .results
        .iter()
        .filter(|r| !r.failed())
        .map(|r| r.sentence_id.as_str())
        .collect();
    let predicted: Vec<_> = output
        .results
        .iter()
        .filter(|r| !r.failed())
        .flat_map(|r| r.entity_refs())
        .collect();
    let report = score(&predicted, &dataset.gold_for(&completed))?;
    Ok(Evaluation { output, report })
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: EnsembleConfig,
    /// One row per configuration in canonical order.
    pub rows: Vec<SearchResultRow>,
}

impl SearchOutcome {
    pub fn best_row(&self) -> &SearchResultRow {
        self.rows
            .iter()
            .min_by(|a, b| compare_rows(a, b))
            .expect("search outcome has rows")
    }
}

/// Evaluates every configuration on the sample and picks the best by
/// [`compare_rows`].
pub fn select_best(
    pipeline: &Pipeline<'_>,
    sample: &GoldDataset,
    configs: &[EnsembleConfig],
    flags: AblationFlags,
) -> Result<SearchOutcome, SearchError> {
    if configs.is_empty() {
        return Err(SearchError::NoConfigs);
    }
    let rows: Vec<SearchResultRow> = configs
        .par_iter()
        .enumerate()
        .map(|(index, config)| {
            let started = Instant::now();
            let evaluation = evaluate(pipeline, config, sample, flags)?;
            let failed_sentences = evaluation.output.failed_sentences();
            if failed_sentences > 0 {
                log::warn!("configuration {index}: {failed_sentences} sentence(s) failed");
            }
            Ok(SearchResultRow {
                index,
                config: config.clone(),
                report: evaluation.report,
                wall_time_ms: started.elapsed().as_millis(),
                cache_hit_rate: evaluation.output.queries.hit_rate(),
                failed_sentences,
            })
        })
        .collect::<Result<_, SearchError>>()?;
    let best = rows
        .iter()
        .min_by(|a, b| compare_rows(a, b))
        .expect("non-empty")
        .config
        .clone();
    Ok(SearchOutcome { best, rows })
}

fn join_ids(ids: &BTreeSet<ModelId>) -> String {
    ids.iter().map(String::as_str).collect::<Vec<_>>().join("+")
}

/// Writes rows as CSV with model sets rendered as `+`-joined sorted ids.
pub fn write_rows_csv<W: std::io::Write>(rows: &[SearchResultRow], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "extraction",
        "voting",
        "disambiguation",
        "dev_p",
        "dev_r",
        "dev_f1",
        "wall_time_ms",
        "cache_hit_rate",
        "failed_sentences",
    ])?;
    for row in rows {
        writer.write_record([
            join_ids(&row.config.extraction_models),
            join_ids(&row.config.voting_models),
            join_ids(&row.config.disambiguation_models),
            format!("{:.6}", row.dev_precision()),
            format!("{:.6}", row.dev_recall()),
            format!("{:.6}", row.dev_f1()),
            row.wall_time_ms.to_string(),
            format!("{:.6}", row.cache_hit_rate),
            row.failed_sentences.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_rows_csv(rows: &[SearchResultRow], path: &Path) -> Result<(), SearchError> {
    let output_err = |message: String| SearchError::Output {
        path: path.display().to_string(),
        message,
    };
    let file = std::fs::File::create(path).map_err(|e| output_err(e.to_string()))?;
    write_rows_csv(rows, file).map_err(|e| output_err(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub model: ModelId,
    pub best: f64,
    /// Score for every grid point, in ascending temperature order.
    pub scores: Vec<(f64, EvalReport)>,
}

/// Picks the extraction temperature with the best single-model F1; ties
/// go to the lowest temperature.
pub fn calibrate_temperature(
    pipeline: &Pipeline<'_>,
    model: &str,
    grid: &[f64],
    sample: &GoldDataset,
) -> Result<Calibration, SearchError> {
    if grid.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    let mut temperatures = grid.to_vec();
    temperatures.sort_by(f64::total_cmp);
    temperatures.dedup();

    let mut scores = Vec::with_capacity(temperatures.len());
    for &t in &temperatures {
        let config = EnsembleConfig::single(model, t);
        let evaluation = evaluate(pipeline, &config, sample, AblationFlags::default())?;
        scores.push((t, evaluation.report));
    }
    let mut best = 0;
    for (i, (_, report)) in scores.iter().enumerate() {
        if report.f1() > scores[best].1.f1() {
            best = i;
        }
    }
    Ok(Calibration {
        model: model.to_string(),
        best: scores[best].0,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{EntityTypeSchema, Scores, Sentence, TypeEntry};

    fn models(n: usize) -> (BTreeSet<ModelId>, BTreeMap<ModelId, f64>) {
        let ids: BTreeSet<ModelId> = (0..n).map(|i| format!("m{i}")).collect();
        let temps = ids.iter().map(|m| (m.clone(), 0.0)).collect();
        (ids, temps)
    }

    #[test]
    fn config_counts() {
        for (n, expected) in [(1, 1), (3, 7 * 4 * 4), (5, 31 * 16 * 16)] {
            let (ids, temps) = models(n);
            assert_eq!(enumerate_configs(&ids, &temps).unwrap().len(), expected);
        }
    }

    #[test]
    fn configs_are_valid_and_distinct() {
        let (ids, temps) = models(3);
        let configs = enumerate_configs(&ids, &temps).unwrap();
        for c in &configs {
            c.validate(&ids).unwrap();
        }
        let distinct: BTreeSet<String> = configs.iter().map(|c| serde_json::to_string(c).unwrap()).collect();
        assert_eq!(distinct.len(), configs.len());
        assert_eq!(configs[0].extraction_models, BTreeSet::from(["m0".to_string()]));
    }

    #[test]
    fn missing_temperature_is_rejected() {
        let (ids, mut temps) = models(2);
        temps.remove("m1");
        assert!(matches!(
            enumerate_configs(&ids, &temps),
            Err(SearchError::Config(ConfigError::MissingTemperature(_)))
        ));
    }

    fn dataset(n: usize) -> GoldDataset {
        let schema = EntityTypeSchema::new("d", vec![TypeEntry::new("LOC", "places")]).unwrap();
        let sentences = (0..n).map(|i| Sentence::new(format!("s{i:04}"), format!("frase {i}"))).collect();
        GoldDataset::new(schema, sentences, vec![], BTreeMap::new()).unwrap()
    }

    #[test]
    fn sampling_is_seeded_and_clamped() {
        let big = dataset(500);
        let a = sample_dev_set(&big, 100, 7).unwrap();
        let b = sample_dev_set(&big, 100, 7).unwrap();
        let c = sample_dev_set(&big, 100, 8).unwrap();
        assert_eq!(a.sentences.len(), 100);
        assert_eq!(a.sentences, b.sentences);
        assert_ne!(a.sentences, c.sentences);
        let unique: BTreeSet<_> = a.sentences.iter().map(|s| &s.id).collect();
        assert_eq!(unique.len(), 100);

        let small = dataset(80);
        assert_eq!(sample_dev_set(&small, 100, 1).unwrap().sentences.len(), 80);
        assert!(matches!(sample_dev_set(&dataset(0), 10, 1), Err(SearchError::EmptyDataset)));
        assert!(matches!(sample_dev_set(&small, 0, 1), Err(SearchError::ZeroSampleSize)));
    }

    fn row(index: usize, p: f64, r: f64, panel: usize) -> SearchResultRow {
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let (ids, _) = models(panel);
        let config = EnsembleConfig {
            extraction_models: ids.clone(),
            voting_models: BTreeSet::from(["m0".to_string()]),
            disambiguation_models: BTreeSet::from(["m0".to_string()]),
            extraction_temperatures: ids.iter().map(|m| (m.clone(), 0.0)).collect(),
            provenance: None,
        };
        SearchResultRow {
            index,
            config,
            report: EvalReport {
                micro: Scores {
                    precision: p,
                    recall: r,
                    f1,
                    ..Scores::default()
                },
                per_type: BTreeMap::new(),
            },
            wall_time_ms: 0,
            cache_hit_rate: 0.0,
            failed_sentences: 0,
        }
    }

    #[test]
    fn ranking_rules() {
        // Higher F1 first.
        assert_eq!(compare_rows(&row(0, 0.6, 0.6, 1), &row(1, 0.55, 0.55, 1)), Ordering::Less);
        // Equal F1: higher precision wins.
        let mut a = row(1, 0.70, 0.5, 1);
        let mut b = row(0, 0.65, 0.5, 1);
        a.report.micro.f1 = 0.6;
        b.report.micro.f1 = 0.6;
        assert_eq!(compare_rows(&a, &b), Ordering::Less);
        // Then the smaller ensemble, then canonical order.
        assert_eq!(compare_rows(&row(5, 0.5, 0.5, 1), &row(0, 0.5, 0.5, 2)), Ordering::Less);
        assert_eq!(compare_rows(&row(0, 0.5, 0.5, 1), &row(5, 0.5, 0.5, 1)), Ordering::Less);
    }

    #[test]
    fn csv_columns() {
        let mut buf = Vec::new();
        write_rows_csv(&[row(0, 0.5, 0.25, 2)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "extraction,voting,disambiguation,dev_p,dev_r,dev_f1,wall_time_ms,cache_hit_rate,failed_sentences"
        );
        assert!(lines.next().unwrap().starts_with("m0+m1,m0,m0,0.500000,0.250000,0.333333,"));
    }
}
