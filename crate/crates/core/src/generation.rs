//! Generator input assembly, training-data export, and parse backends.

use std::collections::HashSet;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_jsonl, CorpusError, Instance, Pair};
use crate::http::{HttpError, JsonClient};
use crate::lexicon::{IdentityMode, LexiconEntry};
use crate::metrics::OvcMatcher;

pub const UNK_CONSTRUCT: &str = "UNK_CONSTRUCT";
pub const DEFAULT_SEPARATOR: &str = "###";
pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const FEW_SHOT_EXEMPLARS: usize = 3;

const BUILTIN_PROMPT: &str = include_str!("../data/prompt_default.toml");

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("mode {0:?} requires at least one exemplar")]
    MissingExemplars(ContextMode),
    #[error("mode NONE takes no context entries, got {0}")]
    UnexpectedContext(usize),
    #[error("token budget {budget} is smaller than the input itself ({needed} tokens)")]
    BudgetTooSmall { budget: usize, needed: usize },
    #[error("stage {stage:?} is not valid under strategy {strategy:?}")]
    StageMismatch { stage: Stage, strategy: Strategy },
    #[error("{instances} instances but {retrieved} retrieval lists")]
    Misaligned { instances: usize, retrieved: usize },
    #[error("backend returned an empty completion")]
    EmptyOutput,
    #[error("backend unavailable: {0}")]
    Unavailable(HttpError),
    #[error("backend rejected request: {0}")]
    Backend(HttpError),
    #[error("invalid prompt template: {0}")]
    Template(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GenerationError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GenerationError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum ContextMode {
    None,
    #[default]
    Lex,
    Docs,
    Exemplar,
}

impl ContextMode {
    /// Whether the mode consumes retrieved lexicon entries.
    pub fn uses_entries(self) -> bool {
        matches!(self, ContextMode::Lex | ContextMode::Docs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub x: String,
    pub context_entries: Vec<LexiconEntry>,
    pub mode: ContextMode,
    #[serde(default)]
    pub exemplars: Vec<Pair>,
}

impl GenerationRequest {
    pub fn check(&self) -> Result<(), GenerationError> {
        match self.mode {
            ContextMode::Exemplar if self.exemplars.is_empty() => Err(GenerationError::MissingExemplars(self.mode)),
            ContextMode::None if !self.context_entries.is_empty() => {
                Err(GenerationError::UnexpectedContext(self.context_entries.len()))
            }
            _ => Ok(()),
        }
    }
}

fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn render(x: &str, entries: &[LexiconEntry], mode: ContextMode, exemplars: &[Pair], separator: &str) -> String {
    match mode {
        ContextMode::None => x.to_string(),
        ContextMode::Lex | ContextMode::Docs if entries.is_empty() => x.to_string(),
        ContextMode::Lex => {
            let lines: Vec<String> = entries.iter().map(|e| format!("{} => {}", e.key, e.value)).collect();
            format!("{x}\n{separator}\n{}", lines.join("\n"))
        }
        ContextMode::Docs => {
            let lines: Vec<&str> = entries.iter().map(|e| e.key.as_str()).collect();
            format!("{x}\n{separator}\n{}", lines.join("\n"))
        }
        ContextMode::Exemplar => {
            let mut out = String::new();
            for ex in exemplars {
                out.push_str(&format!("{}\n{separator}\n{}\n\n", ex.x, ex.y));
            }
            out.push_str(x);
            out
        }
    }
}

/// Builds the generator input for `x`. With a `token_budget` (whitespace
/// tokens), trailing entries or exemplars are dropped until the text fits.
pub fn assemble_context(
    x: &str,
    entries: &[LexiconEntry],
    mode: ContextMode,
    exemplars: &[Pair],
    token_budget: Option<usize>,
) -> Result<String, GenerationError> {
    assemble_context_with(x, entries, mode, exemplars, token_budget, DEFAULT_SEPARATOR)
}

pub fn assemble_context_with(
    x: &str,
    entries: &[LexiconEntry],
    mode: ContextMode,
    exemplars: &[Pair],
    token_budget: Option<usize>,
    separator: &str,
) -> Result<String, GenerationError> {
    GenerationRequest {
        x: x.to_string(),
        context_entries: entries.to_vec(),
        mode,
        exemplars: exemplars.to_vec(),
    }
    .check()?;
    let Some(budget) = token_budget else {
        return Ok(render(x, entries, mode, exemplars, separator));
    };
    let needed = token_count(x);
    if needed > budget {
        return Err(GenerationError::BudgetTooSmall { budget, needed });
    }
    let (mut n_entries, mut n_exemplars) = (entries.len(), exemplars.len());
    loop {
        let text = render(x, &entries[..n_entries], mode, &exemplars[..n_exemplars], separator);
        if token_count(&text) <= budget {
            return Ok(text);
        }
        if mode == ContextMode::Exemplar {
            n_exemplars -= 1;
        } else {
            n_entries -= 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Training data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Basic,
    ExtraSup,
    Multitask,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Single,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub input_text: String,
    pub target_text: String,
    pub stage: Stage,
    pub strategy: Strategy,
}

impl TrainingRow {
    pub fn new(input_text: String, target_text: String, stage: Stage, strategy: Strategy) -> Result<Self, GenerationError> {
        let staged = stage != Stage::Single;
        if staged != (strategy == Strategy::Transfer) {
            return Err(GenerationError::StageMismatch { stage, strategy });
        }
        Ok(Self { input_text, target_text, stage, strategy })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetFormat {
    /// Joins serialized `key => value` entries.
    pub entry_joiner: String,
    /// Separates the serialized entries from the formal output.
    pub separator: String,
}

impl Default for TargetFormat {
    fn default() -> Self {
        Self { entry_joiner: " ; ".into(), separator: DEFAULT_SEPARATOR.into() }
    }
}

impl TargetFormat {
    pub fn entries(&self, entries: &[&LexiconEntry]) -> String {
        entries.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(&self.entry_joiner)
    }

    pub fn entries_then_output(&self, entries: &[&LexiconEntry], y: &str) -> String {
        let ser = self.entries(entries);
        if ser.is_empty() {
            format!("{} {y}", self.separator)
        } else {
            format!("{ser} {} {y}", self.separator)
        }
    }
}

/// Training rows for one strategy. TRANSFER emits all stage-1 rows first,
/// then all stage-2 rows.
pub fn format_training_data(
    instances: &[Instance],
    retrieved_per_instance: &[Vec<LexiconEntry>],
    strategy: Strategy,
) -> Result<Vec<TrainingRow>, GenerationError> {
    format_training_data_with(instances, retrieved_per_instance, strategy, &TargetFormat::default())
}

pub fn format_training_data_with(
    instances: &[Instance],
    retrieved_per_instance: &[Vec<LexiconEntry>],
    strategy: Strategy,
    format: &TargetFormat,
) -> Result<Vec<TrainingRow>, GenerationError> {
    if instances.len() != retrieved_per_instance.len() {
        return Err(GenerationError::Misaligned {
            instances: instances.len(),
            retrieved: retrieved_per_instance.len(),
        });
    }
    let lex = |x: &str, entries: &[LexiconEntry]| render(x, entries, ContextMode::Lex, &[], &format.separator);
    let mut rows = Vec::new();
    let mut stage2 = Vec::new();
    for (inst, k_star) in instances.iter().zip(retrieved_per_instance) {
        let k_y: Vec<&LexiconEntry> = inst.genuine_gold().collect();
        let with_k_star = lex(&inst.x, k_star);
        match strategy {
            Strategy::Basic => {
                rows.push(TrainingRow::new(with_k_star, inst.y.clone(), Stage::Single, strategy)?);
            }
            Strategy::ExtraSup => {
                let owned: Vec<LexiconEntry> = k_y.iter().map(|e| (*e).clone()).collect();
                rows.push(TrainingRow::new(with_k_star, inst.y.clone(), Stage::Single, strategy)?);
                rows.push(TrainingRow::new(lex(&inst.x, &owned), inst.y.clone(), Stage::Single, strategy)?);
            }
            Strategy::Multitask => {
                let target = format.entries_then_output(&k_y, &inst.y);
                rows.push(TrainingRow::new(with_k_star, target, Stage::Single, strategy)?);
            }
            Strategy::Transfer => {
                rows.push(TrainingRow::new(with_k_star.clone(), format.entries(&k_y), Stage::Stage1, strategy)?);
                stage2.push(TrainingRow::new(with_k_star, inst.y.clone(), Stage::Stage2, strategy)?);
            }
        }
    }
    rows.extend(stage2);
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Backends

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendMeta {
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    /// Wall-clock time of the call; not serialized so replays compare equal.
    #[serde(skip)]
    pub latency: Duration,
}

/// Equality ignores `latency`.
impl PartialEq for BackendMeta {
    fn eq(&self, other: &Self) -> bool {
        self.backend == other.backend && self.raw_response == other.raw_response
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub y_hat: String,
    pub meta: BackendMeta,
}

pub trait Generator: Send {
    /// `instance` carries gold data; only test backends may read it.
    fn generate(&self, request: &GenerationRequest, input_text: &str, instance: &Instance) -> Result<Generation, GenerationError>;
}

fn merge(mut spans: Vec<Range<usize>>) -> Vec<Range<usize>> {
    spans.sort_by_key(|r| (r.start, r.end));
    let mut out: Vec<Range<usize>> = Vec::new();
    for r in spans {
        match out.last_mut() {
            Some(last) if r.start < last.end => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

/// Copies `y`, replacing every genuine gold construct whose identity is not
/// among `context_entries` with [`UNK_CONSTRUCT`].
pub fn oracle_generate(instance: &Instance, context_entries: &[LexiconEntry], mode: IdentityMode) -> String {
    let available: HashSet<_> = context_entries.iter().map(|e| e.identity(mode)).collect();
    let matcher = OvcMatcher::for_domain(instance.domain);
    let known: HashSet<&str> = instance
        .genuine_gold()
        .filter(|e| available.contains(&e.identity(mode)))
        .map(|e| e.value.as_str())
        .collect();
    let spans: Vec<Range<usize>> = instance
        .genuine_gold()
        .filter(|e| !known.contains(e.value.as_str()))
        .flat_map(|e| matcher.find_spans(&instance.y, &e.value))
        .collect();
    let mut y = instance.y.clone();
    for r in merge(spans).into_iter().rev() {
        y.replace_range(r, UNK_CONSTRUCT);
    }
    y
}

#[derive(Debug, Clone, Copy)]
pub struct OracleGenerator {
    pub identity_mode: IdentityMode,
}

impl Generator for OracleGenerator {
    fn generate(&self, request: &GenerationRequest, _input_text: &str, instance: &Instance) -> Result<Generation, GenerationError> {
        let start = Instant::now();
        let y_hat = oracle_generate(instance, &request.context_entries, self.identity_mode);
        Ok(Generation {
            y_hat,
            meta: BackendMeta { backend: "oracle".into(), raw_response: None, latency: start.elapsed() },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub preamble: String,
    pub exemplar: String,
    pub query: String,
}

impl PromptTemplate {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PROMPT).expect("builtin prompt template is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenerationError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, GenerationError> {
        let t: Self = toml::from_str(text).map_err(|e| GenerationError::Template(e.to_string()))?;
        if !t.query.contains("{input}") {
            return Err(GenerationError::Template("query must contain {input}".into()));
        }
        Ok(t)
    }

    pub fn render(&self, exemplars: &[Pair], input_text: &str) -> String {
        let mut out = self.preamble.clone();
        for ex in exemplars {
            out.push_str(&self.exemplar.replace("{input}", &ex.x).replace("{output}", &ex.y));
        }
        out.push_str(&self.query.replace("{input}", input_text));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_llm_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Prompt template file; the builtin template when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
    /// Line-delimited `{x, y}` file; the first `n_exemplars` rows are used.
    #[serde(default)]
    pub exemplars: Option<PathBuf>,
    #[serde(default = "default_n_exemplars")]
    pub n_exemplars: usize,
}

fn default_model() -> String {
    "default".into()
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_max_tokens() -> u32 {
    256
}
fn default_llm_token_env() -> String {
    "DKAP_LLM_API_KEY".into()
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_retries() -> u32 {
    2
}
fn default_n_exemplars() -> usize {
    FEW_SHOT_EXEMPLARS
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: default_model(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: default_max_tokens(),
            token_env: default_llm_token_env(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_retries(),
            template: None,
            exemplars: None,
            n_exemplars: FEW_SHOT_EXEMPLARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    text: String,
}

/// Reads the first `n` rows of an exemplar file.
pub fn load_exemplars(path: impl AsRef<Path>, n: usize) -> Result<Vec<Pair>, GenerationError> {
    let mut rows: Vec<Pair> = read_jsonl(path)?;
    rows.truncate(n);
    Ok(rows)
}

/// Completion-service backend speaking `{prompt, temperature, max_tokens}`
/// to `{text}`.
#[derive(Debug, Clone)]
pub struct LlmGenerator {
    client: JsonClient,
    config: LlmConfig,
    template: PromptTemplate,
    exemplars: Vec<Pair>,
}

impl LlmGenerator {
    pub fn new(config: LlmConfig) -> Result<Self, GenerationError> {
        let template = match &config.template {
            Some(path) => PromptTemplate::load(path)?,
            None => PromptTemplate::builtin(),
        };
        let exemplars = match &config.exemplars {
            Some(path) => load_exemplars(path, config.n_exemplars)?,
            None => Vec::new(),
        };
        let mut client = JsonClient::new(
            config.endpoint.clone(),
            JsonClient::token_from_env(&config.token_env),
            Duration::from_secs(config.timeout_secs),
        );
        client.max_retries = config.max_retries;
        Ok(Self { client, config, template, exemplars })
    }

    pub fn exemplars(&self) -> &[Pair] {
        &self.exemplars
    }

    pub fn prompt(&self, input_text: &str) -> String {
        self.template.render(&self.exemplars, input_text)
    }

    pub fn request(&self, input_text: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: self.prompt(input_text),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            model: self.config.model.clone(),
        }
    }
}

impl Generator for LlmGenerator {
    fn generate(&self, _request: &GenerationRequest, input_text: &str, _instance: &Instance) -> Result<Generation, GenerationError> {
        let start = Instant::now();
        let (resp, raw): (CompletionResponse, String) = self.client.post(&self.request(input_text)).map_err(|e| {
            if e.is_retryable() {
                GenerationError::Unavailable(e)
            } else {
                GenerationError::Backend(e)
            }
        })?;
        let y_hat = resp.text.trim().to_string();
        if y_hat.is_empty() {
            return Err(GenerationError::EmptyOutput);
        }
        Ok(Generation {
            y_hat,
            meta: BackendMeta { backend: format!("llm:{}", self.config.model), raw_response: Some(raw), latency: start.elapsed() },
        })
    }
}
