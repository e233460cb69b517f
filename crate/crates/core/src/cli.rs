//! Command-line surface: `run`, `search`, `calibrate`, and `eval`.
//!
//! All commands read a JSON run manifest describing the models, the
//! dataset, templates, and the cache directory. Command-line flags override
//! manifest fields.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendStats, MockScript, ModelEndpoint, ResponseCache, ScriptSpec};
use crate::dataio::{self, DataError, GoldDataset};
use crate::metrics::{render_table, score, MetricsError};
use crate::pipeline::{AblationFlags, Diagnostic, Pipeline, PipelineError, PipelineSettings, RunOutput};
use crate::prompting::{PromptError, PromptSet, PromptTemplate, TemplateKind, DEFAULT_MAX_PROMPT_CHARS};
use crate::search::{
    calibrate_temperature, enumerate_configs, sample_dev_set, save_rows_csv, select_best, SearchError,
    SearchOutcome, DEFAULT_DEV_SIZE, DEFAULT_TEMPERATURE_GRID,
};
use crate::types::{EnsembleConfig, EntityRef, EntityTypeSchema, EvalReport, ModelId, Provenance, TypeEntry};

pub const MANIFEST_SNAPSHOT: &str = "manifest.snapshot.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const RUN_SUMMARY_FILE: &str = "run_summary.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const SEARCH_RESULTS_FILE: &str = "search_results.csv";
pub const SEARCH_RESULTS_TEST_FILE: &str = "search_results_test.csv";
pub const BEST_CONFIG_FILE: &str = "best_config.json";
pub const TEMPERATURES_FILE: &str = "temperatures.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("manifest {path}: {message}")]
    Manifest { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("BackendUnavailable: every sentence failed ({0})")]
    AllSentencesFailed(String),
    #[error("{0}")]
    Usage(String),
}

/// One model in the manifest: either a live endpoint or a scripted mock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: ModelId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub served_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<ScriptSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Bio,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    /// JSON document, or a single unsplit BIO file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// BIO split files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Required for BIO input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Vec<TypeEntry>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disambiguation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_definition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub models: Vec<ModelSpec>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub templates: TemplateOverrides,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(default)]
    pub flags: AblationFlags,
    /// Extraction temperatures used by `search`; missing models use 0.
    #[serde(default)]
    pub temperatures: BTreeMap<ModelId, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub settings: Option<PipelineSettings>,
    #[serde(default = "one")]
    pub samples_per_query: u32,
}

impl RunManifest {
    /// Reads a manifest, resolves relative paths against its directory, and
    /// checks that referenced files exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let manifest_err = |message: String| CliError::Manifest {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| manifest_err(e.to_string()))?;
        let mut manifest: RunManifest = serde_json::from_str(&text).map_err(|e| manifest_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        manifest.resolve_paths(base);
        manifest.check().map_err(manifest_err)?;
        Ok(manifest)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut self.dataset.path);
        resolve(&mut self.dataset.train);
        resolve(&mut self.dataset.test);
        resolve(&mut self.templates.extraction);
        resolve(&mut self.templates.vote);
        resolve(&mut self.templates.disambiguation);
        resolve(&mut self.cache_dir);
        resolve(&mut self.output_dir);
    }

    fn check(&self) -> Result<(), String> {
        if self.models.is_empty() {
            return Err("no models".into());
        }
        let mut ids = BTreeSet::new();
        for model in &self.models {
            if !ids.insert(&model.model_id) {
                return Err(format!("duplicate model id {:?}", model.model_id));
            }
            match (&model.base_url, &model.mock) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => return Err(format!("model {:?} needs exactly one of base_url or mock", model.model_id)),
            }
        }
        let dataset_paths = [&self.dataset.path, &self.dataset.train, &self.dataset.test];
        if dataset_paths.iter().all(|p| p.is_none()) {
            return Err("dataset needs a path or train/test files".into());
        }
        let template_paths = [
            &self.templates.extraction,
            &self.templates.vote,
            &self.templates.disambiguation,
        ];
        for path in dataset_paths.into_iter().chain(template_paths).flatten() {
            if !path.exists() {
                return Err(format!("{} does not exist", path.display()));
            }
        }
        if self.dataset.format == DatasetFormat::Bio && self.dataset.schema.is_none() {
            return Err("BIO datasets need a schema".into());
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<GoldDataset, CliError> {
        let spec = &self.dataset;
        match spec.format {
            DatasetFormat::Json => {
                let path = spec
                    .path
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("JSON datasets are read from dataset.path".into()))?;
                Ok(dataio::load_json(path)?)
            }
            DatasetFormat::Bio => {
                let entries = spec.schema.clone().unwrap_or_default();
                let dataset_id = spec.dataset_id.clone().unwrap_or_else(|| "dataset".into());
                let schema = EntityTypeSchema::new(dataset_id, entries)
                    .map_err(|e| CliError::Usage(format!("dataset schema: {e}")))?;
                if let Some(path) = &spec.path {
                    return Ok(dataio::load_bio(path, &schema)?);
                }
                let mut files: Vec<(&str, &Path)> = Vec::new();
                if let Some(train) = &spec.train {
                    files.push(("train", train));
                }
                if let Some(test) = &spec.test {
                    files.push(("test", test));
                }
                Ok(dataio::load_bio_splits(&files, &schema)?)
            }
        }
    }

    pub fn prompts(&self) -> Result<PromptSet, CliError> {
        let mut prompts = PromptSet::default();
        let t = &self.templates;
        if let Some(path) = &t.extraction {
            prompts.extraction = PromptTemplate::from_file(TemplateKind::Extraction, path)?;
        }
        if let Some(path) = &t.vote {
            prompts.vote = PromptTemplate::from_file(TemplateKind::Vote, path)?;
        }
        if let Some(path) = &t.disambiguation {
            prompts.disambiguation = PromptTemplate::from_file(TemplateKind::Disambiguation, path)?;
        }
        if let Some(definition) = &t.task_definition {
            prompts.task_definition = definition.clone();
        }
        prompts.max_chars = t.max_prompt_chars.unwrap_or(DEFAULT_MAX_PROMPT_CHARS);
        Ok(prompts)
    }

    /// Registers every model on a backend sharing the manifest's cache.
    pub fn backend(&self, backoff: Duration) -> Result<Backend, CliError> {
        let cache = match &self.cache_dir {
            Some(dir) => ResponseCache::on_disk(dir).map_err(|source| DataError::Io {
                path: dir.clone(),
                source,
            })?,
            None => ResponseCache::in_memory(),
        };
        let mut backend = Backend::new(cache)
            .with_backoff(backoff)
            .with_samples_per_query(self.samples_per_query);
        for model in &self.models {
            if let Some(script) = &model.mock {
                backend.register_mock(model.model_id.clone(), MockScript::from(script.clone()))?;
            } else if let Some(url) = &model.base_url {
                let mut endpoint = ModelEndpoint::new(model.model_id.clone(), url.clone());
                endpoint.served_model = model.served_model.clone();
                endpoint.auth = model.auth.clone();
                if let Some(retries) = model.max_retries {
                    endpoint.max_retries = retries;
                }
                if let Some(timeout) = model.timeout_secs {
                    endpoint.timeout_secs = timeout;
                }
                backend.register_endpoint(endpoint)?;
            }
        }
        Ok(backend)
    }

    pub fn model_ids(&self) -> BTreeSet<ModelId> {
        self.models.iter().map(|m| m.model_id.clone()).collect()
    }

    pub fn temperatures(&self) -> BTreeMap<ModelId, f64> {
        self.models
            .iter()
            .map(|m| (m.model_id.clone(), self.temperatures.get(&m.model_id).copied().unwrap_or(0.0)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Keep every extracted candidate without voting.
    NoVoting,
    /// Resolve every overlap group to its largest option.
    SimpleDisambiguation,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Overrides the manifest output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the manifest cache directory.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Worker threads; defaults to the number of registered models.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Base delay of the retry backoff, in milliseconds.
    #[arg(long, default_value_t = 250)]
    pub backoff_ms: u64,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Ensemble configuration (JSON) to run.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Dataset split to run; the whole dataset when the split is absent.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = DEFAULT_DEV_SIZE)]
    pub dev_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Also score every configuration on the test split.
    #[arg(long)]
    pub exhaustive_on_test: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Models to calibrate; all registered models by default.
    #[arg(long)]
    pub model: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TEMPERATURE_GRID.to_vec())]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_DEV_SIZE)]
    pub dev_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Manifest whose dataset holds the gold annotations.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Predictions written by `run`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Where to write the JSON report.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Run the pipeline with one configuration over a dataset split.
    Run(RunArgs),
    /// Evaluate every configuration on a dev sample and keep the best.
    Search(SearchArgs),
    /// Find each model's best extraction temperature.
    Calibrate(CalibrateArgs),
    /// Score a predictions file against gold.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Parser)]
#[command(name = "ner-ensemble", version, about = "Zero-shot NER with an ensemble of chat-completion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// How a command finished; maps onto the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    Partial,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Complete => 0,
            Status::Partial => 2,
        }
    }
}

fn flags_from(base: AblationFlags, ablate: &[Ablation]) -> AblationFlags {
    AblationFlags {
        skip_voting: base.skip_voting || ablate.contains(&Ablation::NoVoting),
        simple_disambiguation: base.simple_disambiguation || ablate.contains(&Ablation::SimpleDisambiguation),
    }
}

struct Context {
    manifest: RunManifest,
    dataset: GoldDataset,
    prompts: PromptSet,
    backend: Backend,
    settings: PipelineSettings,
    output_dir: PathBuf,
    pool: rayon::ThreadPool,
}

impl Context {
    fn open(common: &CommonArgs) -> Result<Self, CliError> {
        let mut manifest = RunManifest::load(&common.manifest)?;
        if let Some(dir) = &common.cache_dir {
            manifest.cache_dir = Some(dir.clone());
        }
        if let Some(dir) = &common.output_dir {
            manifest.output_dir = Some(dir.clone());
        }
        if let Some(n) = common.parallelism {
            manifest.parallelism = Some(n);
        }
        let output_dir = manifest
            .output_dir
            .clone()
            .ok_or_else(|| CliError::Usage("no output directory (manifest output_dir or --output-dir)".into()))?;
        std::fs::create_dir_all(&output_dir).map_err(|source| DataError::Io {
            path: output_dir.clone(),
            source,
        })?;
        dataio::save_json_value(&manifest, &output_dir.join(MANIFEST_SNAPSHOT))?;

        let dataset = manifest.load_dataset()?;
        let prompts = manifest.prompts()?;
        let backend = manifest.backend(Duration::from_millis(common.backoff_ms))?;
        let threads = manifest.parallelism.unwrap_or(manifest.models.len()).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
        let settings = manifest.settings.clone().unwrap_or_default();
        Ok(Self {
            manifest,
            dataset,
            prompts,
            backend,
            settings,
            output_dir,
            pool,
        })
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(&self.backend, &self.dataset.schema, &self.prompts).with_settings(self.settings.clone())
    }

    /// Dev sample drawn from the train split (or the whole dataset).
    fn dev_sample(&self, size: usize, seed: u64) -> Result<GoldDataset, CliError> {
        let pool = self.dataset.subset(self.dataset.split_sentences("train"));
        Ok(sample_dev_set(&pool, size, seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub sentences: usize,
    pub failed_sentences: usize,
    pub entities: usize,
    pub requests: u64,
    pub cache_hits: u64,
    pub wire_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: EnsembleConfig,
    pub flags: AblationFlags,
    pub target_dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<String>,
    pub split: String,
    pub counts: RunCounts,
    pub failures: Vec<Diagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    /// Seconds since the Unix epoch.
    pub finished_at: u64,
}

#[derive(Debug, Clone)]
pub struct RunCommandOutput {
    pub status: Status,
    pub summary: RunSummary,
    pub output: RunOutput,
}

pub fn execute_run(args: &RunArgs) -> Result<RunCommandOutput, CliError> {
    let ctx = Context::open(&args.common)?;
    let config = dataio::load_config(&args.config)?;
    let flags = flags_from(ctx.manifest.flags, &args.ablate);
    let sentences = ctx.dataset.split_sentences(&args.split);
    if !ctx.dataset.has_split(&args.split) {
        log::info!("dataset has no {:?} split; running every sentence", args.split);
    }

    let pipeline = ctx.pipeline();
    let output = ctx.pool.install(|| pipeline.run_pipeline(&config, &sentences, flags))?;
    dataio::save_predictions(&output.results, &ctx.output_dir.join(PREDICTIONS_FILE))?;

    let failures: Vec<Diagnostic> = output.results.iter().flat_map(|r| r.failures.clone()).collect();
    let failed = output.failed_sentences();
    let report = if ctx.dataset.gold.is_empty() {
        None
    } else {
        let ids: BTreeSet<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
        let report = score(&output.predictions(), &ctx.dataset.gold_for(&ids))?;
        print!("{}", render_table(&report));
        dataio::save_json_value(&report, &ctx.output_dir.join(EVAL_REPORT_FILE))?;
        Some(report)
    };

    let stats: BackendStats = ctx.backend.stats();
    let summary = RunSummary {
        config: config.clone(),
        flags,
        target_dataset: ctx.dataset.dataset_id.clone(),
        source_dataset: config.provenance.as_ref().map(|p| p.source_dataset.clone()),
        split: args.split.clone(),
        counts: RunCounts {
            sentences: output.results.len(),
            failed_sentences: failed,
            entities: output.results.iter().map(|r| r.final_entities.len()).sum(),
            requests: output.queries.requests,
            cache_hits: output.queries.cache_hits,
            wire_calls: stats.wire_calls,
        },
        failures: failures.clone(),
        report,
        finished_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    dataio::save_json_value(&summary, &ctx.output_dir.join(RUN_SUMMARY_FILE))?;

    if failed > 0 && failed == output.results.len() {
        let first = failures.first().map(|f| f.reason.clone()).unwrap_or_default();
        return Err(CliError::AllSentencesFailed(first));
    }
    let status = if failed > 0 { Status::Partial } else { Status::Complete };
    if failed > 0 {
        eprintln!("{failed} of {} sentence(s) failed", output.results.len());
    }
    Ok(RunCommandOutput {
        status,
        summary,
        output,
    })
}

#[derive(Debug, Clone)]
pub struct SearchCommandOutput {
    pub status: Status,
    pub outcome: SearchOutcome,
    pub test_outcome: Option<SearchOutcome>,
    pub stats: BackendStats,
}

pub fn execute_search(args: &SearchArgs) -> Result<SearchCommandOutput, CliError> {
    let ctx = Context::open(&args.common)?;
    let flags = flags_from(ctx.manifest.flags, &args.ablate);
    let sample = ctx.dev_sample(args.dev_size, args.seed)?;
    let configs = enumerate_configs(&ctx.backend.model_ids(), &ctx.manifest.temperatures())?;
    log::info!(
        "evaluating {} configurations on {} dev sentences",
        configs.len(),
        sample.sentences.len()
    );

    let pipeline = ctx.pipeline();
    let mut outcome = ctx.pool.install(|| select_best(&pipeline, &sample, &configs, flags))?;
    outcome.best.provenance = Some(Provenance {
        source_dataset: ctx.dataset.dataset_id.clone(),
        dev_seed: args.seed,
    });
    save_rows_csv(&outcome.rows, &ctx.output_dir.join(SEARCH_RESULTS_FILE))?;
    dataio::save_config(&outcome.best, &ctx.output_dir.join(BEST_CONFIG_FILE))?;

    let test_outcome = if args.exhaustive_on_test {
        let test = ctx.dataset.subset(ctx.dataset.split_sentences("test"));
        let test_outcome = ctx.pool.install(|| select_best(&pipeline, &test, &configs, flags))?;
        save_rows_csv(&test_outcome.rows, &ctx.output_dir.join(SEARCH_RESULTS_TEST_FILE))?;
        Some(test_outcome)
    } else {
        None
    };

    let best = outcome.best_row();
    println!(
        "best configuration #{}: extraction={:?} voting={:?} disambiguation={:?} dev P={:.4} R={:.4} F1={:.4}",
        best.index,
        best.config.extraction_models,
        best.config.voting_models,
        best.config.disambiguation_models,
        best.dev_precision(),
        best.dev_recall(),
        best.dev_f1()
    );
    let partial = outcome.rows.iter().any(|r| r.failed_sentences > 0);
    Ok(SearchCommandOutput {
        status: if partial { Status::Partial } else { Status::Complete },
        outcome,
        test_outcome,
        stats: ctx.backend.stats(),
    })
}

pub fn execute_calibrate(args: &CalibrateArgs) -> Result<BTreeMap<ModelId, f64>, CliError> {
    let ctx = Context::open(&args.common)?;
    let sample = ctx.dev_sample(args.dev_size, args.seed)?;
    let models: Vec<ModelId> = if args.model.is_empty() {
        ctx.backend.model_ids().into_iter().collect()
    } else {
        args.model.clone()
    };
    let pipeline = ctx.pipeline();
    let mut chosen = BTreeMap::new();
    for model in models {
        if !ctx.backend.is_registered(&model) {
            return Err(BackendError::UnknownModel(model).into());
        }
        let calibration = ctx.pool.install(|| calibrate_temperature(&pipeline, &model, &args.grid, &sample))?;
        for (t, report) in &calibration.scores {
            println!("{model}\tt={t}\tF1={:.4}", report.f1());
        }
        println!("{model}\tbest t={}", calibration.best);
        chosen.insert(model, calibration.best);
    }
    dataio::save_json_value(&chosen, &ctx.output_dir.join(TEMPERATURES_FILE))?;
    Ok(chosen)
}

pub fn execute_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let manifest = RunManifest::load(&args.manifest)?;
    let dataset = manifest.load_dataset()?;
    let results = dataio::load_predictions(&args.predictions)?;
    let sentences = dataset.split_sentences(&args.split);
    let ids: BTreeSet<&str> = sentences.iter().map(|s| s.id.as_str()).collect();
    let predicted: Vec<EntityRef> = results
        .iter()
        .filter(|r| ids.contains(r.sentence_id.as_str()))
        .flat_map(|r| r.entity_refs())
        .collect();
    let report = score(&predicted, &dataset.gold_for(&ids))?;
    print!("{}", render_table(&report));
    if let Some(path) = &args.output {
        dataio::save_json_value(&report, path)?;
    }
    Ok(report)
}

/// Parses arguments, runs the command, and returns the process exit code:
/// 0 on success, 2 when some sentences failed, 1 on fatal errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => execute_run(args).map(|o| o.status),
        Command::Search(args) => execute_search(args).map(|o| o.status),
        Command::Calibrate(args) => execute_calibrate(args).map(|_| Status::Complete),
        Command::Eval(args) => execute_eval(args).map(|_| Status::Complete),
    };
    match result {
        Ok(status) => status.exit_code(),
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}
