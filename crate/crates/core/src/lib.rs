//! Dynamic knowledge-augmented parsing.
//!
//! A parser's generator is given, at inference time, entries retrieved from
//! a key-value lexicon that grows with expert feedback over the course of an
//! episode. This crate provides the lexicon store, a grammar-based synthetic
//! data generator, corpus ingestion, BM25 and dense retrieval, generator
//! context assembly and backends, the episode harness, and metrics.

pub mod corpus;
pub mod generation;
pub mod grammar;
pub mod harness;
pub mod http;
pub mod lexicon;
pub mod metrics;
pub mod retrieval;

pub use corpus::Instance;
pub use harness::{run_episode, Episode, EpisodeConfig, FeedbackPolicy, ParseRecord};
pub use lexicon::{Domain, IdentityMode, KbSnapshot, KnowledgeBase, LexiconEntry, Source};
pub use metrics::EpisodeReport;
pub use retrieval::RetrievalResult;
