//! Lexicon retrieval.
//!
//! Two rankers share one result type: an Okapi BM25 ranker over entry keys
//! and a dense ranker over unit-normalized embeddings from an external
//! provider. Both order by descending score with ties broken by ascending
//! entry `seq`, and both record the `snapshot_seq` of the knowledge base they
//! ranked, so no entry added later can ever surface.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Instance;
use crate::http::{HttpError, JsonClient};
use crate::lexicon::{IdentityMode, KbSnapshot, KnowledgeBase, LexiconEntry};

pub const DEFAULT_TOP_N: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetrievalError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(HttpError),
    #[error("embedding provider rejected request: {0}")]
    Provider(HttpError),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} vectors for {expected} texts")]
    VectorCount { expected: usize, got: usize },
    #[error("embedding has zero or non-finite norm")]
    DegenerateVector,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("n must be at least 1")]
    ZeroN,
}

impl RetrievalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RetrievalError::ProviderUnavailable(_))
    }
}

/// Lowercase, split on non-alphanumeric characters, drop empty tokens.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn unique_terms(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    analyze(text).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IndexConfig {
    #[serde(default)]
    pub params: Bm25Params,
    /// Also index entry values, not just keys.
    #[serde(default)]
    pub index_values: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry: LexiconEntry,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub n: usize,
    pub snapshot_seq: u64,
    pub ranked: Vec<ScoredEntry>,
}

impl RetrievalResult {
    pub fn empty(query: &str, n: usize, snapshot_seq: u64) -> Self {
        Self { query: query.to_string(), n, snapshot_seq, ranked: Vec::new() }
    }

    pub fn entries(&self) -> Vec<LexiconEntry> {
        self.ranked.iter().map(|s| s.entry.clone()).collect()
    }
}

fn rank(entries: &[LexiconEntry], scores: impl IntoIterator<Item = (usize, f64)>, n: usize) -> Vec<ScoredEntry> {
    let mut scored: Vec<(usize, f64)> = scores.into_iter().collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| entries[a.0].seq.cmp(&entries[b.0].seq))
    });
    scored.truncate(n);
    scored
        .into_iter()
        .map(|(i, score)| ScoredEntry { entry: entries[i].clone(), score })
        .collect()
}

// ---------------------------------------------------------------------------
// BM25

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Position of the entry in the snapshot (equals its seq).
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone)]
pub struct LexiconIndex {
    pub postings: HashMap<String, Vec<Posting>>,
    pub doc_lengths: Vec<u32>,
    pub avg_doc_length: f64,
    pub corpus_size: usize,
    pub snapshot_seq: u64,
    pub config: IndexConfig,
    entries: Arc<[LexiconEntry]>,
}

impl LexiconIndex {
    pub fn build(snapshot: &KbSnapshot, config: IndexConfig) -> Self {
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(snapshot.len());
        for (doc, entry) in snapshot.entries.iter().enumerate() {
            let mut tokens = analyze(&entry.key);
            if config.index_values {
                tokens.extend(analyze(&entry.value));
            }
            doc_lengths.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0) += 1;
            }
            for (term, tf) in tf {
                postings.entry(term).or_default().push(Posting { doc: doc as u32, tf });
            }
        }
        let corpus_size = doc_lengths.len();
        let avg_doc_length = if corpus_size == 0 {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / corpus_size as f64
        };
        Self {
            postings,
            doc_lengths,
            avg_doc_length,
            corpus_size,
            snapshot_seq: snapshot.snapshot_seq,
            config,
            entries: snapshot.entries.clone(),
        }
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.postings.get(term).map_or(0, Vec::len) as f64;
        let n = self.corpus_size as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: u32, doc: usize, p: Bm25Params) -> f64 {
        let tf = tf as f64;
        let len = self.doc_lengths[doc] as f64;
        let norm = if self.avg_doc_length > 0.0 { len / self.avg_doc_length } else { 0.0 };
        idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm))
    }

    /// BM25 score of one indexed document for the given (deduplicated) terms.
    pub fn score_doc(&self, query_terms: &[String], doc: usize, p: Bm25Params) -> f64 {
        let mut score = 0.0;
        for term in query_terms {
            let Some(list) = self.postings.get(term) else { continue };
            if let Ok(i) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_score(self.idf(term), list[i].tf, doc, p);
            }
        }
        score
    }

    /// Top-`n` entries with positive score.
    pub fn retrieve(&self, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::ZeroN);
        }
        let terms = unique_terms(query);
        let p = self.config.params;
        let mut scores: HashMap<usize, f64> = HashMap::new();
        // Accumulate term by term, in query order, so per-document sums match
        // score_doc exactly.
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for posting in list {
                let doc = posting.doc as usize;
                *scores.entry(doc).or_insert(0.0) += self.term_score(idf, posting.tf, doc, p);
            }
        }
        Ok(RetrievalResult {
            query: query.to_string(),
            n,
            snapshot_seq: self.snapshot_seq,
            ranked: rank(&self.entries, scores.into_iter().filter(|(_, s)| *s > 0.0), n),
        })
    }
}

/// BM25 score of `entry` against `query_terms` using `index` statistics.
/// Entries not in the index score 0.
pub fn bm25_score(query_terms: &[String], entry: &LexiconEntry, index: &LexiconIndex, k1: f64, b: f64) -> f64 {
    let Some(seq) = entry.seq else { return 0.0 };
    let doc = seq as usize;
    if doc >= index.corpus_size || index.entries[doc] != *entry {
        return 0.0;
    }
    let mut terms = Vec::new();
    for t in query_terms {
        if !terms.contains(t) {
            terms.push(t.clone());
        }
    }
    index.score_doc(&terms, doc, Bm25Params { k1, b })
}

pub fn build_index(snapshot: &KbSnapshot) -> LexiconIndex {
    LexiconIndex::build(snapshot, IndexConfig::default())
}

pub fn retrieve(index: &LexiconIndex, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
    index.retrieve(query, n)
}

// ---------------------------------------------------------------------------
// Dense retrieval

/// A unit-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(RetrievalError::DegenerateVector);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the provider and model for embedding caches.
    fn cache_key(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

/// Deterministic offline provider: signed feature hashing of analyzed tokens.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn cache_key(&self) -> String {
        format!("hashing/{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = vec![0.0; self.dim];
                for t in analyze(text) {
                    let h = fnv1a(&t);
                    let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
                    v[(h % self.dim as u64) as usize] += sign;
                }
                // Empty text still needs a valid direction.
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    pub dim: usize,
    #[serde(default = "default_embed_token_env")]
    pub token_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_model() -> String {
    "default".into()
}
fn default_embed_token_env() -> String {
    "DKAP_EMBED_API_KEY".into()
}
fn default_timeout_secs() -> u64 {
    30
}
fn default_retries() -> u32 {
    2
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Provider speaking `{texts} -> {vectors, dim}` over HTTP.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: JsonClient,
    model: String,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(config: &HttpEmbedderConfig) -> Self {
        let mut client = JsonClient::new(
            config.endpoint.clone(),
            JsonClient::token_from_env(&config.token_env),
            Duration::from_secs(config.timeout_secs),
        );
        client.max_retries = config.max_retries;
        Self { client, model: config.model.clone(), dim: config.dim }
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn cache_key(&self) -> String {
        format!("{}#{}", self.client.endpoint, self.model)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let (resp, _): (EmbedResponse, _) = self.client.post(&EmbedRequest { texts }).map_err(|e| {
            if e.is_retryable() {
                RetrievalError::ProviderUnavailable(e)
            } else {
                RetrievalError::Provider(e)
            }
        })?;
        if resp.dim != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: resp.dim });
        }
        Ok(resp.vectors)
    }
}

/// Embeds `texts` in batches with at most `max_in_flight` concurrent calls,
/// validating dimensions and normalizing.
pub fn embed_all(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    batch_size: usize,
    max_in_flight: usize,
) -> Result<Vec<EmbeddingVector>, RetrievalError> {
    let batches: Vec<&[String]> = texts.chunks(batch_size.max(1)).collect();
    let mut out = Vec::with_capacity(texts.len());
    for wave in batches.chunks(max_in_flight.max(1)) {
        let results: Vec<Result<Vec<Vec<f64>>, RetrievalError>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave.iter().map(|b| s.spawn(|| provider.embed(b))).collect();
            handles.into_iter().map(|h| h.join().expect("embedding thread panicked")).collect()
        });
        for (batch, vectors) in wave.iter().zip(results) {
            let vectors = vectors?;
            if vectors.len() != batch.len() {
                return Err(RetrievalError::VectorCount { expected: batch.len(), got: vectors.len() });
            }
            for v in vectors {
                if v.len() != provider.dim() {
                    return Err(RetrievalError::DimensionMismatch { expected: provider.dim(), got: v.len() });
                }
                out.push(EmbeddingVector::new(v)?);
            }
        }
    }
    Ok(out)
}

/// Cached key embeddings for one provider. Refreshing embeds only entries
/// added since the last refresh.
#[derive(Debug, Clone)]
pub struct DenseIndex {
    pub cache_key: String,
    pub snapshot_seq: u64,
    entries: Arc<[LexiconEntry]>,
    vectors: Vec<EmbeddingVector>,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl DenseIndex {
    pub fn new(provider: &dyn EmbeddingProvider) -> Self {
        Self {
            cache_key: provider.cache_key(),
            snapshot_seq: 0,
            entries: Arc::from(Vec::new()),
            vectors: Vec::new(),
            batch_size: 64,
            max_in_flight: 4,
        }
    }

    pub fn refresh(&mut self, snapshot: &KbSnapshot, provider: &dyn EmbeddingProvider) -> Result<(), RetrievalError> {
        if provider.cache_key() != self.cache_key || snapshot.len() < self.vectors.len() {
            *self = DenseIndex { batch_size: self.batch_size, max_in_flight: self.max_in_flight, ..Self::new(provider) };
        }
        let new: Vec<String> = snapshot.entries[self.vectors.len()..].iter().map(|e| e.key.clone()).collect();
        if !new.is_empty() {
            let vectors = embed_all(provider, &new, self.batch_size, self.max_in_flight)?;
            self.vectors.extend(vectors);
        }
        self.entries = snapshot.entries.clone();
        self.snapshot_seq = snapshot.snapshot_seq;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn search(&self, query: &str, query_vec: &EmbeddingVector, n: usize) -> Result<RetrievalResult, RetrievalError> {
        if n == 0 {
            return Err(RetrievalError::ZeroN);
        }
        if let Some(v) = self.vectors.first() {
            if v.dim() != query_vec.dim() {
                return Err(RetrievalError::DimensionMismatch { expected: v.dim(), got: query_vec.dim() });
            }
        }
        let scores = self.vectors.iter().enumerate().map(|(i, v)| (i, v.dot(query_vec)));
        Ok(RetrievalResult {
            query: query.to_string(),
            n,
            snapshot_seq: self.snapshot_seq,
            ranked: rank(&self.entries, scores, n),
        })
    }
}

/// Ranks all snapshot entries by cosine similarity to the query.
pub fn dense_retrieve(
    query: &str,
    snapshot: &KbSnapshot,
    n: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<RetrievalResult, RetrievalError> {
    let mut index = DenseIndex::new(provider);
    index.refresh(snapshot, provider)?;
    let q = embed_all(provider, &[query.to_string()], 1, 1)?.remove(0);
    index.search(query, &q, n)
}

// ---------------------------------------------------------------------------
// Stateful retrievers used by episodes

pub trait Retriever: Send {
    fn retrieve(&mut self, kb: &KnowledgeBase, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError>;
}

/// Rebuilds its BM25 index whenever the knowledge base has grown.
#[derive(Debug, Default)]
pub struct Bm25Retriever {
    config: IndexConfig,
    index: Option<LexiconIndex>,
}

impl Bm25Retriever {
    pub fn new(config: IndexConfig) -> Self {
        Self { config, index: None }
    }
}

impl Retriever for Bm25Retriever {
    fn retrieve(&mut self, kb: &KnowledgeBase, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        let stale = self.index.as_ref().is_none_or(|i| i.snapshot_seq != kb.len() as u64);
        if stale {
            self.index = Some(LexiconIndex::build(&kb.snapshot(), self.config));
        }
        self.index.as_ref().expect("index built").retrieve(query, n)
    }
}

pub struct DenseRetriever {
    provider: Box<dyn EmbeddingProvider>,
    index: DenseIndex,
}

impl DenseRetriever {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        let index = DenseIndex::new(provider.as_ref());
        Self { provider, index }
    }
}

impl Retriever for DenseRetriever {
    fn retrieve(&mut self, kb: &KnowledgeBase, query: &str, n: usize) -> Result<RetrievalResult, RetrievalError> {
        if self.index.snapshot_seq != kb.len() as u64 || self.index.len() != kb.len() {
            self.index.refresh(&kb.snapshot(), self.provider.as_ref())?;
        }
        if kb.is_empty() {
            return Ok(RetrievalResult::empty(query, n, 0));
        }
        let q = embed_all(self.provider.as_ref(), &[query.to_string()], 1, 1)?.remove(0);
        self.index.search(query, &q, n)
    }
}

// ---------------------------------------------------------------------------
// Contrastive objective and training export

/// InfoNCE loss for one (p, q) pair against explicit negatives:
/// `-log( exp(<p,q>/τ) / (exp(<p,q>/τ) + Σ exp(<p,q'>/τ)) )`, computed with
/// log-sum-exp.
pub fn contrastive_loss(
    e_p: &EmbeddingVector,
    e_q: &EmbeddingVector,
    negatives: &[EmbeddingVector],
    tau: f64,
) -> Result<f64, RetrievalError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RetrievalError::BadTemperature(tau));
    }
    for v in std::iter::once(e_q).chain(negatives) {
        if v.dim() != e_p.dim() {
            return Err(RetrievalError::DimensionMismatch { expected: e_p.dim(), got: v.dim() });
        }
    }
    let positive = e_p.dot(e_q) / tau;
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().map(|n| e_p.dot(n) / tau))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - positive).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub query: String,
    pub positive: String,
}

/// One `(x, key)` row per genuine gold entry; distractors are skipped.
pub fn export_contrastive_pairs(instances: &[Instance]) -> Vec<ContrastivePair> {
    instances
        .iter()
        .flat_map(|inst| {
            inst.genuine_gold().map(|e| ContrastivePair { query: inst.x.clone(), positive: e.key.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub recall: f64,
    /// The gold set was empty and recall is 1.0 by definition.
    pub vacuous: bool,
}

pub fn recall_at_k(result: &RetrievalResult, gold: &[LexiconEntry], k: usize, mode: IdentityMode) -> RecallAtK {
    let gold_ids: HashSet<_> = gold.iter().map(|e| e.identity(mode)).collect();
    if gold_ids.is_empty() {
        return RecallAtK { recall: 1.0, vacuous: true };
    }
    let hits = result
        .ranked
        .iter()
        .take(k.max(1))
        .map(|s| s.entry.identity(mode))
        .filter(|id| gold_ids.contains(id))
        .collect::<HashSet<_>>()
        .len();
    RecallAtK { recall: hits as f64 / gold_ids.len() as f64, vacuous: false }
}
