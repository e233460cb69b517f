//! The three-stage ensemble pipeline: extraction, voting, disambiguation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, CompletionQuery, DEFAULT_MAX_TOKENS};
use crate::parsing::{parse_choice_response, parse_extraction_detailed, parse_vote_response, ChoiceAnswer};
use crate::prompting::{PromptSet, MAX_PROMPT_OPTIONS};
use crate::spans::{
    build_groups, enumerate_options, largest_option, DisambiguationOption, OverlapGroup, SpanError,
    DEFAULT_MAX_GROUP_MEMBERS, DEFAULT_MAX_OPTIONS,
};
use crate::types::{
    validate_config, ConfigError, EnsembleConfig, EntityRef, EntityTypeSchema, MentionCandidate, ModelId, Sentence,
    Span, Stage, VoteAnswer,
};

/// Temperature used for every vote and disambiguation query.
pub const JUDGE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Every extracted candidate passes without being voted on.
    #[serde(default)]
    pub skip_voting: bool,
    /// Every overlap group resolves to its largest option without queries.
    #[serde(default)]
    pub simple_disambiguation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSettings {
    /// Options offered per group before N/A (1..=5).
    pub max_options: usize,
    pub max_group_members: usize,
    /// Re-ask once at temperature 0 before recording an Invalid answer.
    pub requery_invalid: bool,
    pub max_tokens: u32,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            max_options: DEFAULT_MAX_OPTIONS,
            max_group_members: DEFAULT_MAX_GROUP_MEMBERS,
            requery_invalid: true,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid ensemble configuration: {0}")]
    Config(#[from] ConfigError),
}

/// A structured note about something that went wrong for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub sentence_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<ModelId>,
    pub stage: Stage,
    pub reason: String,
}

impl Diagnostic {
    fn new(sentence: &Sentence, model: Option<&str>, stage: Stage, reason: impl Into<String>) -> Self {
        let diagnostic = Self {
            sentence_id: sentence.id.clone(),
            model_id: model.map(str::to_string),
            stage,
            reason: reason.into(),
        };
        log::debug!(
            "sentence={} model={} stage={} reason={}",
            diagnostic.sentence_id,
            diagnostic.model_id.as_deref().unwrap_or("-"),
            diagnostic.stage,
            diagnostic.reason
        );
        diagnostic
    }
}

/// Query accounting for one sentence or run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTally {
    pub requests: u64,
    pub cache_hits: u64,
}

impl QueryTally {
    fn add(&mut self, other: QueryTally) {
        self.requests += other.requests;
        self.cache_hits += other.cache_hits;
    }

    pub fn hit_rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.requests as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum GroupOutcome {
    /// Option index chosen by the panel.
    Voted(usize),
    NotApplicable,
    /// Largest option taken without (usable) panel answers.
    Largest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub extent: Span,
    pub members: usize,
    /// Total lengths of the offered options, in rank order.
    pub option_lengths: Vec<usize>,
    pub choices: BTreeMap<ModelId, ChoiceAnswer>,
    pub outcome: GroupOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    /// Valid entities parsed per extraction model.
    pub extracted: BTreeMap<ModelId, usize>,
    /// Every merged candidate with the votes it received.
    pub candidates: Vec<MentionCandidate>,
    pub groups: Vec<GroupTrace>,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub sentence_id: String,
    pub final_entities: Vec<MentionCandidate>,
    pub stage_trace: StageTrace,
    /// Backend failures hit while processing this sentence.
    pub failures: Vec<Diagnostic>,
    pub queries: QueryTally,
}

impl SentenceResult {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn entity_refs(&self) -> impl Iterator<Item = EntityRef> + '_ {
        self.final_entities.iter().map(EntityRef::from)
    }
}

/// Results of one pipeline run, ordered by sentence id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub results: Vec<SentenceResult>,
    pub queries: QueryTally,
}

impl RunOutput {
    pub fn predictions(&self) -> Vec<EntityRef> {
        self.results.iter().flat_map(|r| r.entity_refs()).collect()
    }

    pub fn failed_sentences(&self) -> usize {
        self.results.iter().filter(|r| r.failed()).count()
    }
}

/// Accepts iff strictly more than half of the full panel voted Yes. Missing
/// and Invalid votes count against acceptance.
pub fn majority(votes: &BTreeMap<ModelId, VoteAnswer>, panel: &BTreeSet<ModelId>) -> bool {
    let yes = panel
        .iter()
        .filter(|m| votes.get(*m) == Some(&VoteAnswer::Yes))
        .count();
    2 * yes > panel.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Pick(usize),
    NotApplicable,
    NoValidVotes,
}

/// Plurality over panel choices. `option_lengths` excludes N/A, which sits
/// at index `option_lengths.len()` with length 0. Vote ties go to the
/// longest tied option, then to the better-ranked one.
pub fn plurality(choices: &[ChoiceAnswer], option_lengths: &[usize]) -> Selection {
    let na = option_lengths.len();
    let mut counts = vec![0usize; na + 1];
    for choice in choices {
        if let ChoiceAnswer::Pick(i) = *choice {
            if i <= na {
                counts[i] += 1;
            }
        }
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    if top == 0 {
        return Selection::NoValidVotes;
    }
    let length = |i: usize| option_lengths.get(i).copied().unwrap_or(0);
    let winner = (0..=na)
        .filter(|&i| counts[i] == top)
        .min_by(|&a, &b| length(b).cmp(&length(a)).then(a.cmp(&b)))
        .expect("at least one option reaches the top count");
    if winner == na {
        Selection::NotApplicable
    } else {
        Selection::Pick(winner)
    }
}

/// Output of the extraction stage for one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub candidates: Vec<MentionCandidate>,
    pub extracted: BTreeMap<ModelId, usize>,
    pub diagnostics: Vec<Diagnostic>,
    pub failures: Vec<Diagnostic>,
    pub queries: QueryTally,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Voting {
    pub accepted: Vec<MentionCandidate>,
    /// All candidates with their votes recorded.
    pub voted: Vec<MentionCandidate>,
    pub diagnostics: Vec<Diagnostic>,
    pub failures: Vec<Diagnostic>,
    pub queries: QueryTally,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Disambiguation {
    pub final_entities: Vec<MentionCandidate>,
    pub groups: Vec<GroupTrace>,
    pub diagnostics: Vec<Diagnostic>,
    pub failures: Vec<Diagnostic>,
    pub queries: QueryTally,
}

/// Runs the stages for one dataset schema against a shared backend.
pub struct Pipeline<'a> {
    backend: &'a Backend,
    schema: &'a EntityTypeSchema,
    prompts: &'a PromptSet,
    settings: PipelineSettings,
}

impl<'a> Pipeline<'a> {
    pub fn new(backend: &'a Backend, schema: &'a EntityTypeSchema, prompts: &'a PromptSet) -> Self {
        Self {
            backend,
            schema,
            prompts,
            settings: PipelineSettings::default(),
        }
    }

    pub fn with_settings(mut self, settings: PipelineSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn schema(&self) -> &EntityTypeSchema {
        self.schema
    }

    fn query(&self, model: &str, prompt: &str, temperature: f64) -> CompletionQuery {
        let mut q = CompletionQuery::new(model, prompt, temperature);
        q.max_tokens = self.settings.max_tokens;
        q
    }

    pub fn run_extraction_stage(&self, config: &EnsembleConfig, sentence: &Sentence) -> Extraction {
        let mut out = Extraction::default();
        let prompt = match self.prompts.extraction(self.schema, sentence) {
            Ok(p) => p,
            Err(err) => {
                out.failures.push(Diagnostic::new(sentence, None, Stage::Extraction, err.to_string()));
                return out;
            }
        };

        let mut merged: BTreeMap<(Span, String), MentionCandidate> = BTreeMap::new();
        for model in &config.extraction_models {
            let temperature = config.temperature(model).unwrap_or(0.0);
            out.queries.requests += 1;
            let completion = match self.backend.complete(&self.query(model, &prompt, temperature)) {
                Ok(c) => c,
                Err(err) => {
                    out.failures
                        .push(Diagnostic::new(sentence, Some(model), Stage::Extraction, err.to_string()));
                    continue;
                }
            };
            if completion.cached {
                out.queries.cache_hits += 1;
            }
            let parsed = match parse_extraction_detailed(&completion.text, self.schema, sentence, model) {
                Ok(parsed) => parsed,
                Err(err) => {
                    out.diagnostics
                        .push(Diagnostic::new(sentence, Some(model), Stage::Extraction, err.to_string()));
                    out.extracted.insert(model.clone(), 0);
                    continue;
                }
            };
            for rejection in &parsed.rejected {
                out.diagnostics.push(Diagnostic::new(
                    sentence,
                    Some(model),
                    Stage::Extraction,
                    rejection.to_string(),
                ));
            }
            out.extracted.insert(model.clone(), parsed.candidates.len());
            for candidate in parsed.candidates {
                merged
                    .entry((candidate.span, candidate.label.clone()))
                    .and_modify(|existing| existing.extractors.extend(candidate.extractors.iter().cloned()))
                    .or_insert(candidate);
            }
        }
        out.candidates = merged.into_values().collect();
        out
    }

    fn ask_vote(
        &self,
        model: &str,
        prompt: &str,
        sentence: &Sentence,
        tally: &mut QueryTally,
        failures: &mut Vec<Diagnostic>,
    ) -> VoteAnswer {
        let attempts = if self.settings.requery_invalid { 2 } else { 1 };
        for attempt in 0..attempts {
            tally.requests += 1;
            let q = self.query(model, prompt, JUDGE_TEMPERATURE).with_attempt(attempt);
            match self.backend.complete(&q) {
                Ok(c) => {
                    if c.cached {
                        tally.cache_hits += 1;
                    }
                    let answer = parse_vote_response(&c.text);
                    if answer != VoteAnswer::Invalid {
                        return answer;
                    }
                }
                Err(err) => {
                    failures.push(Diagnostic::new(sentence, Some(model), Stage::Voting, err.to_string()));
                    return VoteAnswer::Invalid;
                }
            }
        }
        VoteAnswer::Invalid
    }

    pub fn run_voting_stage(
        &self,
        config: &EnsembleConfig,
        sentence: &Sentence,
        candidates: Vec<MentionCandidate>,
        flags: AblationFlags,
    ) -> Voting {
        let mut out = Voting::default();
        if flags.skip_voting {
            out.accepted = candidates.clone();
            out.voted = candidates;
            return out;
        }
        for mut candidate in candidates {
            match self.prompts.vote(self.schema, sentence, &candidate) {
                Ok(prompt) => {
                    for model in &config.voting_models {
                        let answer = self.ask_vote(model, &prompt, sentence, &mut out.queries, &mut out.failures);
                        if answer == VoteAnswer::Invalid {
                            out.diagnostics.push(Diagnostic::new(
                                sentence,
                                Some(model),
                                Stage::Voting,
                                format!("invalid vote on {:?}", candidate.text),
                            ));
                        }
                        candidate.votes.insert(model.clone(), answer);
                    }
                }
                Err(err) => {
                    out.failures.push(Diagnostic::new(sentence, None, Stage::Voting, err.to_string()));
                    for model in &config.voting_models {
                        candidate.votes.insert(model.clone(), VoteAnswer::Invalid);
                    }
                }
            }
            if majority(&candidate.votes, &config.voting_models) {
                out.accepted.push(candidate.clone());
            }
            out.voted.push(candidate);
        }
        out
    }

    fn ask_choice(
        &self,
        model: &str,
        prompt: &str,
        option_count: usize,
        sentence: &Sentence,
        out: &mut Disambiguation,
    ) -> ChoiceAnswer {
        let attempts = if self.settings.requery_invalid { 2 } else { 1 };
        for attempt in 0..attempts {
            out.queries.requests += 1;
            let q = self.query(model, prompt, JUDGE_TEMPERATURE).with_attempt(attempt);
            match self.backend.complete(&q) {
                Ok(c) => {
                    if c.cached {
                        out.queries.cache_hits += 1;
                    }
                    let answer = parse_choice_response(&c.text, option_count);
                    if answer != ChoiceAnswer::Invalid {
                        return answer;
                    }
                }
                Err(err) => {
                    out.failures
                        .push(Diagnostic::new(sentence, Some(model), Stage::Disambiguation, err.to_string()));
                    return ChoiceAnswer::Invalid;
                }
            }
        }
        out.diagnostics.push(Diagnostic::new(
            sentence,
            Some(model),
            Stage::Disambiguation,
            "invalid choice",
        ));
        ChoiceAnswer::Invalid
    }

    fn resolve_group(
        &self,
        config: &EnsembleConfig,
        sentence: &Sentence,
        group: &OverlapGroup,
        flags: AblationFlags,
        out: &mut Disambiguation,
    ) -> (Vec<MentionCandidate>, GroupTrace) {
        let mut trace = GroupTrace {
            extent: group.extent(),
            members: group.members.len(),
            option_lengths: Vec::new(),
            choices: BTreeMap::new(),
            outcome: GroupOutcome::Voted(0),
        };
        let k = self.settings.max_options.clamp(1, MAX_PROMPT_OPTIONS);
        let options: Vec<DisambiguationOption> =
            match enumerate_options(group, k, self.settings.max_group_members) {
                Ok(options) => options,
                Err(err @ SpanError::GroupTooLarge { .. }) => {
                    out.diagnostics
                        .push(Diagnostic::new(sentence, None, Stage::Disambiguation, err.to_string()));
                    let largest = largest_option(group);
                    trace.option_lengths = vec![largest.total_length];
                    trace.outcome = GroupOutcome::Largest("group too large".into());
                    return (largest.mentions, trace);
                }
                Err(err) => unreachable!("enumerate_options only fails on size: {err}"),
            };
        trace.option_lengths = options.iter().map(|o| o.total_length).collect();

        let largest = |trace: &mut GroupTrace, why: &str| {
            trace.outcome = GroupOutcome::Largest(why.to_string());
            options[0].mentions.clone()
        };
        if flags.simple_disambiguation {
            return (largest(&mut trace, "simple disambiguation"), trace);
        }

        let prompt = match self.prompts.disambiguation(self.schema, sentence, &options) {
            Ok(p) => p,
            Err(err) => {
                out.failures
                    .push(Diagnostic::new(sentence, None, Stage::Disambiguation, err.to_string()));
                return (largest(&mut trace, "prompt rejected"), trace);
            }
        };
        let option_count = options.len() + 1;
        for model in &config.disambiguation_models {
            let choice = self.ask_choice(model, &prompt, option_count, sentence, out);
            trace.choices.insert(model.clone(), choice);
        }
        let choices: Vec<ChoiceAnswer> = trace.choices.values().copied().collect();
        match plurality(&choices, &trace.option_lengths) {
            Selection::Pick(i) => {
                trace.outcome = GroupOutcome::Voted(i);
                (options[i].mentions.clone(), trace)
            }
            Selection::NotApplicable => {
                trace.outcome = GroupOutcome::NotApplicable;
                (Vec::new(), trace)
            }
            Selection::NoValidVotes => (largest(&mut trace, "no valid choices"), trace),
        }
    }

    pub fn run_disambiguation_stage(
        &self,
        config: &EnsembleConfig,
        sentence: &Sentence,
        accepted: &[MentionCandidate],
        flags: AblationFlags,
    ) -> Disambiguation {
        let mut out = Disambiguation::default();
        let partition = build_groups(accepted);
        let mut entities = partition.singletons;
        for group in &partition.groups {
            let (chosen, trace) = self.resolve_group(config, sentence, group, flags, &mut out);
            entities.extend(chosen);
            out.groups.push(trace);
        }
        entities.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        out.final_entities = entities;
        out
    }

    /// All three stages for one sentence. Backend failures are recorded on
    /// the result rather than aborting.
    pub fn run_sentence(&self, config: &EnsembleConfig, sentence: &Sentence, flags: AblationFlags) -> SentenceResult {
        let extraction = self.run_extraction_stage(config, sentence);
        let mut failures = extraction.failures;
        let mut diagnostics = extraction.diagnostics;
        let mut queries = extraction.queries;

        let voting = self.run_voting_stage(config, sentence, extraction.candidates, flags);
        failures.extend(voting.failures);
        diagnostics.extend(voting.diagnostics);
        queries.add(voting.queries);

        let disambiguation = self.run_disambiguation_stage(config, sentence, &voting.accepted, flags);
        failures.extend(disambiguation.failures);
        diagnostics.extend(disambiguation.diagnostics);
        queries.add(disambiguation.queries);

        SentenceResult {
            sentence_id: sentence.id.clone(),
            final_entities: disambiguation.final_entities,
            stage_trace: StageTrace {
                extracted: extraction.extracted,
                candidates: voting.voted,
                groups: disambiguation.groups,
                diagnostics,
            },
            failures,
            queries,
        }
    }

    /// Runs every sentence, in parallel on the current rayon pool.
    pub fn run_pipeline(
        &self,
        config: &EnsembleConfig,
        sentences: &[Sentence],
        flags: AblationFlags,
    ) -> Result<RunOutput, PipelineError> {
        validate_config(config, &self.backend.model_ids())?;
        let mut results: Vec<SentenceResult> = sentences
            .par_iter()
            .map(|sentence| self.run_sentence(config, sentence, flags))
            .collect();
        results.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
        let mut queries = QueryTally::default();
        for result in &results {
            queries.add(result.queries);
        }
        Ok(RunOutput { results, queries })
    }
}
