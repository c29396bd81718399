//! The incremental evaluation loop.
//!
//! An episode walks an instance stream once, starting from an empty
//! knowledge base. Step `t` retrieves from the base as it stood after step
//! `t - 1` (plus any expert submissions since), generates, scores, and then
//! grows the base according to the feedback policy.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Instance, Pair};
use crate::generation::{
    assemble_context, load_exemplars, BackendMeta, ContextMode, GenerationError, GenerationRequest, Generator,
    LlmConfig, LlmGenerator, OracleGenerator,
};
use crate::lexicon::{Domain, IdentityMode, KnowledgeBase, LexiconEntry, LexiconError, Source};
use crate::metrics::{EpisodeReport, OvcMatcher};
use crate::retrieval::{
    Bm25Retriever, DenseRetriever, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig, IndexConfig,
    RetrievalError, RetrievalResult, Retriever, DEFAULT_TOP_N,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("instance stream is empty")]
    EmptyStream,
    #[error("retrieval depth n must be at least 1")]
    ZeroN,
    #[error("invalid episode config: {0}")]
    Config(String),
    #[error("episode finished after {0} steps")]
    Finished(usize),
    #[error("retrieval failed at step {t}: {source}")]
    Retrieval { t: usize, source: RetrievalError },
    #[error("generation failed at step {t}: {source}")]
    Generation { t: usize, source: GenerationError },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Setup(#[from] GenerationError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackPolicy {
    /// Every genuine gold entry not yet in the base.
    #[default]
    AllFirstSeen,
    /// Only entries for constructs the parse missed.
    OnErrorOnly,
    /// No automatic feedback (baselines and expert-only sessions).
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Bm25,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hashing { dim: usize },
    Http(HttpEmbedderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieverConfig {
    #[serde(default)]
    pub kind: RetrieverKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub bm25: IndexConfig,
    #[serde(default)]
    pub embedder: Option<EmbedderConfig>,
}

fn default_n() -> usize {
    DEFAULT_TOP_N
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { kind: RetrieverKind::Bm25, n: DEFAULT_TOP_N, bm25: IndexConfig::default(), embedder: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Oracle,
    Llm(LlmConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub mode: ContextMode,
    #[serde(default)]
    pub backend: BackendConfig,
    /// Whitespace-token budget for the assembled input.
    #[serde(default)]
    pub token_budget: Option<usize>,
    /// Line-delimited `{x, y}` pairs used as context in EXEMPLAR mode.
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    #[serde(default = "default_context_exemplars")]
    pub n_exemplars: usize,
}

fn default_context_exemplars() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    #[serde(default)]
    pub retriever: RetrieverConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub feedback_policy: FeedbackPolicy,
    #[serde(default)]
    pub identity_mode: IdentityMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            retriever: RetrieverConfig::default(),
            generator: GeneratorConfig { n_exemplars: default_context_exemplars(), ..Default::default() },
            feedback_policy: FeedbackPolicy::AllFirstSeen,
            identity_mode: IdentityMode::Pair,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    /// The no-knowledge baseline: no context, no feedback.
    pub fn baseline() -> Self {
        let mut c = Self::default();
        c.generator.mode = ContextMode::None;
        c.feedback_policy = FeedbackPolicy::None;
        c
    }

    pub fn with_policy(mut self, policy: FeedbackPolicy) -> Self {
        self.feedback_policy = policy;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        c.check()?;
        Ok(c)
    }

    /// Loads a TOML config; relative file paths inside it are resolved
    /// against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut c = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p.as_mut() {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        resolve(&mut c.generator.exemplars);
        if let BackendConfig::Llm(llm) = &mut c.generator.backend {
            resolve(&mut llm.template);
            resolve(&mut llm.exemplars);
        }
        Ok(c)
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        if self.retriever.n == 0 {
            return Err(HarnessError::ZeroN);
        }
        if self.generator.mode == ContextMode::Exemplar && self.generator.exemplars.is_none() {
            return Err(HarnessError::Config("EXEMPLAR mode needs generator.exemplars".into()));
        }
        if self.retriever.kind == RetrieverKind::Dense && self.retriever.embedder.is_none() {
            return Err(HarnessError::Config("dense retrieval needs retriever.embedder".into()));
        }
        Ok(())
    }

    pub fn build_retriever(&self) -> Box<dyn Retriever> {
        match (&self.retriever.kind, &self.retriever.embedder) {
            (RetrieverKind::Dense, Some(EmbedderConfig::Hashing { dim })) => {
                Box::new(DenseRetriever::new(Box::new(HashingEmbedder { dim: *dim })))
            }
            (RetrieverKind::Dense, Some(EmbedderConfig::Http(c))) => Box::new(DenseRetriever::new(Box::new(HttpEmbedder::new(c)))),
            _ => Box::new(Bm25Retriever::new(self.retriever.bm25)),
        }
    }

    pub fn build_generator(&self) -> Result<Box<dyn Generator>, HarnessError> {
        Ok(match &self.generator.backend {
            BackendConfig::Oracle => Box::new(OracleGenerator { identity_mode: self.identity_mode }),
            BackendConfig::Llm(c) => Box::new(LlmGenerator::new(c.clone())?),
        })
    }
}

/// The per-step trace of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseRecord {
    /// 1-based step.
    pub t: usize,
    pub x: String,
    pub gold_y: String,
    pub retrieved: RetrievalResult,
    pub input_text: String,
    pub y_hat: String,
    pub ovc_gold: BTreeSet<String>,
    pub ovc_pred: BTreeSet<String>,
    pub k_new_added: Vec<LexiconEntry>,
    /// Expert submissions accepted since the previous step.
    #[serde(default)]
    pub expert_added: Vec<LexiconEntry>,
    /// Equals the running total of `k_new_added` and `expert_added`.
    pub kb_size_after: usize,
    pub backend: BackendMeta,
}

/// Genuine gold entries to add after a step.
pub fn extract_feedback(
    k_gold: &[LexiconEntry],
    ovc_gold: &BTreeSet<String>,
    ovc_pred: &BTreeSet<String>,
    kb: &KnowledgeBase,
    policy: FeedbackPolicy,
) -> Vec<LexiconEntry> {
    let genuine: Vec<LexiconEntry> = k_gold.iter().filter(|e| e.is_genuine()).cloned().collect();
    let fresh = kb.difference(&genuine);
    match policy {
        FeedbackPolicy::AllFirstSeen => fresh,
        FeedbackPolicy::OnErrorOnly => {
            let missed: HashSet<&String> = ovc_gold.difference(ovc_pred).collect();
            fresh.into_iter().filter(|e| missed.contains(&e.value)).collect()
        }
        FeedbackPolicy::None => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Peek {
    pub t: usize,
    pub x: String,
    pub retrieved: RetrievalResult,
}

/// Serializable state of an episode; backends are rebuilt from `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub config: EpisodeConfig,
    pub stream: Vec<Instance>,
    pub kb: KnowledgeBase,
    pub records: Vec<ParseRecord>,
    #[serde(default)]
    pub pending_expert: Vec<LexiconEntry>,
}

pub struct Episode {
    state: EpisodeState,
    retriever: Box<dyn Retriever>,
    generator: Box<dyn Generator>,
    exemplars: Vec<Pair>,
}

impl std::fmt::Debug for Episode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Episode").field("state", &self.state).finish_non_exhaustive()
    }
}

impl Episode {
    pub fn new(stream: Vec<Instance>, config: EpisodeConfig) -> Result<Self, HarnessError> {
        let kb = KnowledgeBase::new(config.identity_mode);
        Self::from_state(EpisodeState { config, stream, kb, records: Vec::new(), pending_expert: Vec::new() })
    }

    pub fn from_state(state: EpisodeState) -> Result<Self, HarnessError> {
        if state.stream.is_empty() {
            return Err(HarnessError::EmptyStream);
        }
        state.config.check()?;
        let generator = state.config.build_generator()?;
        Self::with_generator(state, generator)
    }

    /// Uses `generator` instead of the one described by the config.
    pub fn with_generator(state: EpisodeState, generator: Box<dyn Generator>) -> Result<Self, HarnessError> {
        if state.stream.is_empty() {
            return Err(HarnessError::EmptyStream);
        }
        state.config.check()?;
        let exemplars = match &state.config.generator.exemplars {
            Some(path) => load_exemplars(path, state.config.generator.n_exemplars)?,
            None => Vec::new(),
        };
        Ok(Self { retriever: state.config.build_retriever(), generator, exemplars, state })
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn into_state(self) -> EpisodeState {
        self.state
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.state.kb
    }

    pub fn records(&self) -> &[ParseRecord] {
        &self.state.records
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.state.config
    }

    pub fn domain(&self) -> Domain {
        self.state.stream[0].domain
    }

    /// Next 1-based step.
    pub fn t(&self) -> usize {
        self.state.records.len() + 1
    }

    pub fn is_finished(&self) -> bool {
        self.state.records.len() >= self.state.stream.len()
    }

    fn retrieve(&mut self, x: &str, t: usize) -> Result<RetrievalResult, HarnessError> {
        let n = self.state.config.retriever.n;
        if !self.state.config.generator.mode.uses_entries() {
            return Ok(RetrievalResult::empty(x, n, self.state.kb.len() as u64));
        }
        self.retriever
            .retrieve(&self.state.kb, x, n)
            .map_err(|source| HarnessError::Retrieval { t, source })
    }

    /// The next input and what would be retrieved for it now.
    pub fn peek(&mut self) -> Result<Peek, HarnessError> {
        if self.is_finished() {
            return Err(HarnessError::Finished(self.state.records.len()));
        }
        let t = self.t();
        let x = self.state.stream[t - 1].x.clone();
        let retrieved = self.retrieve(&x, t)?;
        Ok(Peek { t, x, retrieved })
    }

    /// Adds expert entries to the base immediately. Returns the entries that
    /// were new; duplicates are skipped. A malformed batch changes nothing.
    pub fn submit_expert(&mut self, entries: Vec<LexiconEntry>) -> Result<Vec<LexiconEntry>, HarnessError> {
        let domain = self.domain();
        let tagged = entries.into_iter().map(|mut e| {
            e.source = Source::ExpertUi;
            e.seq = None;
            if e.domain == Domain::Other {
                e.domain = domain;
            }
            e
        });
        let added = self.state.kb.insert(tagged)?;
        self.state.pending_expert.extend(added.iter().cloned());
        Ok(added)
    }

    /// Runs one protocol step. On error the episode is unchanged.
    pub fn step(&mut self) -> Result<&ParseRecord, HarnessError> {
        if self.is_finished() {
            return Err(HarnessError::Finished(self.state.records.len()));
        }
        let t = self.t();
        let instance = self.state.stream[t - 1].clone();
        let retrieved = self.retrieve(&instance.x, t)?;
        let gen_cfg = &self.state.config.generator;
        let request = GenerationRequest {
            x: instance.x.clone(),
            context_entries: if gen_cfg.mode.uses_entries() { retrieved.entries() } else { Vec::new() },
            mode: gen_cfg.mode,
            exemplars: if gen_cfg.mode == ContextMode::Exemplar { self.exemplars.clone() } else { Vec::new() },
        };
        let input_text = assemble_context(&request.x, &request.context_entries, request.mode, &request.exemplars, gen_cfg.token_budget)
            .map_err(|source| HarnessError::Generation { t, source })?;
        let generation = self
            .generator
            .generate(&request, &input_text, &instance)
            .map_err(|source| HarnessError::Generation { t, source })?;

        let matcher = OvcMatcher::for_domain(instance.domain);
        let gold: Vec<&LexiconEntry> = instance.genuine_gold().collect();
        let ovc_gold = matcher.extract(&instance.y, gold.iter().copied());
        let ovc_pred = matcher.extract(&generation.y_hat, gold.iter().copied().chain(&request.context_entries));
        let k_new = extract_feedback(&instance.k_gold, &ovc_gold, &ovc_pred, &self.state.kb, self.state.config.feedback_policy);
        let k_new_added = self.state.kb.insert(k_new)?;

        self.state.records.push(ParseRecord {
            t,
            x: instance.x,
            gold_y: instance.y,
            retrieved,
            input_text,
            y_hat: generation.y_hat,
            ovc_gold,
            ovc_pred,
            k_new_added,
            expert_added: std::mem::take(&mut self.state.pending_expert),
            kb_size_after: self.state.kb.len(),
            backend: generation.meta,
        });
        Ok(self.state.records.last().expect("record just pushed"))
    }

    pub fn report(&self) -> EpisodeReport {
        EpisodeReport::from_records(&self.state.records, self.domain())
    }
}

/// An episode that stopped early; `records` holds the completed steps.
#[derive(Debug, Error)]
#[error("episode aborted after {} steps: {error}", records.len())]
pub struct EpisodeAbort {
    pub records: Vec<ParseRecord>,
    pub kb: KnowledgeBase,
    #[source]
    pub error: HarnessError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub records: Vec<ParseRecord>,
    pub report: EpisodeReport,
    pub kb: KnowledgeBase,
}

/// Expert entries to submit before given steps, keyed by 1-based step.
pub type ExpertScript = std::collections::BTreeMap<usize, Vec<LexiconEntry>>;

fn drive(mut episode: Episode, expert: &ExpertScript) -> Result<EpisodeOutcome, EpisodeAbort> {
    while !episode.is_finished() {
        let t = episode.t();
        let result = match expert.get(&t) {
            Some(entries) => episode.submit_expert(entries.clone()).map(|_| ()),
            None => Ok(()),
        }
        .and_then(|_| episode.step().map(|_| ()));
        if let Err(error) = result {
            let state = episode.into_state();
            return Err(EpisodeAbort { records: state.records, kb: state.kb, error });
        }
    }
    let report = episode.report();
    let state = episode.into_state();
    Ok(EpisodeOutcome { records: state.records, report, kb: state.kb })
}

pub fn run_episode(stream: &[Instance], config: &EpisodeConfig) -> Result<EpisodeOutcome, EpisodeAbort> {
    run_episode_with_expert(stream, config, &ExpertScript::new())
}

pub fn run_episode_with_expert(
    stream: &[Instance],
    config: &EpisodeConfig,
    expert: &ExpertScript,
) -> Result<EpisodeOutcome, EpisodeAbort> {
    let episode = Episode::new(stream.to_vec(), config.clone()).map_err(|error| EpisodeAbort {
        records: Vec::new(),
        kb: KnowledgeBase::new(config.identity_mode),
        error,
    })?;
    drive(episode, expert)
}

/// Runs an episode with a caller-supplied generator backend.
pub fn run_episode_with_generator(
    stream: &[Instance],
    config: &EpisodeConfig,
    generator: Box<dyn Generator>,
) -> Result<EpisodeOutcome, EpisodeAbort> {
    let state = EpisodeState {
        config: config.clone(),
        stream: stream.to_vec(),
        kb: KnowledgeBase::new(config.identity_mode),
        records: Vec::new(),
        pending_expert: Vec::new(),
    };
    let episode = Episode::with_generator(state, generator).map_err(|error| EpisodeAbort {
        records: Vec::new(),
        kb: KnowledgeBase::new(config.identity_mode),
        error,
    })?;
    drive(episode, &ExpertScript::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseStatistics {
    /// Cumulative reuse fraction after each occurrence.
    pub per_step: Vec<f64>,
    pub unique: usize,
    pub occurrences: usize,
}

impl ReuseStatistics {
    pub fn final_fraction(&self) -> f64 {
        self.per_step.last().copied().unwrap_or(0.0)
    }
}

/// Reuse over a flat sequence of construct occurrences.
pub fn reuse_over<'a>(occurrences: impl IntoIterator<Item = &'a str>) -> ReuseStatistics {
    let mut seen = HashSet::new();
    let mut per_step = Vec::new();
    for (k, c) in occurrences.into_iter().enumerate() {
        seen.insert(c);
        let k = k + 1;
        per_step.push((k - seen.len()) as f64 / k as f64);
    }
    ReuseStatistics { occurrences: per_step.len(), unique: seen.len(), per_step }
}

/// Reuse over the genuine gold constructs of a stream, one occurrence per
/// distinct construct per instance.
pub fn reuse_statistics(stream: &[Instance]) -> ReuseStatistics {
    let mut flat = Vec::new();
    for inst in stream {
        let mut local = HashSet::new();
        for e in inst.genuine_gold() {
            if local.insert(e.value.as_str()) {
                flat.push(e.value.as_str());
            }
        }
    }
    reuse_over(flat)
}
