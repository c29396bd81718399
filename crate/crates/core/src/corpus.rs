//! Lexicons and gold-augmented instances from existing corpora.
//!
//! Inputs are line-delimited JSON: `{construct_id, doc_text}` documentation
//! records and `{x, y}` pairs. Converting upstream dataset layouts into these
//! records is a preprocessing step outside this crate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{normalize_text, Domain, LexiconEntry, Source};
use crate::metrics::OvcMatcher;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("FIRST_N_CHARS requires n >= 1")]
    ZeroLength,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One task item: NL input, gold output, gold lexicon set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: String,
    pub y: String,
    #[serde(default)]
    pub k_gold: Vec<LexiconEntry>,
    #[serde(default)]
    pub domain: Domain,
}

impl Instance {
    pub fn genuine_gold(&self) -> impl Iterator<Item = &LexiconEntry> {
        self.k_gold.iter().filter(|e| e.is_genuine())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRecord {
    pub construct_id: String,
    pub doc_text: String,
    #[serde(default)]
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub x: String,
    pub y: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcerptMode {
    /// First `n` Unicode scalar values of the documentation, newlines folded
    /// to spaces.
    FirstChars,
    /// First non-blank line.
    FirstLine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestWarning {
    pub index: usize,
    pub construct_id: String,
    pub reason: String,
}

/// Builds one lexicon entry per usable document: the key is an excerpt of
/// the documentation, the value is the construct id verbatim.
pub fn build_lexicon_from_docs(
    docs: &[DocRecord],
    mode: ExcerptMode,
    n: usize,
) -> Result<(Vec<LexiconEntry>, Vec<IngestWarning>), CorpusError> {
    if mode == ExcerptMode::FirstChars && n == 0 {
        return Err(CorpusError::ZeroLength);
    }
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for (index, doc) in docs.iter().enumerate() {
        let warn = |reason: &str| IngestWarning {
            index,
            construct_id: doc.construct_id.clone(),
            reason: reason.to_string(),
        };
        let excerpt = match mode {
            ExcerptMode::FirstChars => doc.doc_text.chars().take(n).collect::<String>(),
            ExcerptMode::FirstLine => doc
                .doc_text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or_default()
                .to_string(),
        };
        let key = normalize_text(&excerpt);
        if key.is_empty() {
            warnings.push(warn("documentation has no text line"));
            continue;
        }
        if normalize_text(&doc.construct_id).is_empty() {
            warnings.push(warn("empty construct id"));
            continue;
        }
        entries.push(LexiconEntry::new(&key, &doc.construct_id, doc.domain, Source::Ingested));
    }
    Ok((entries, warnings))
}

/// Attaches to every pair the lexicon entries whose value the domain matcher
/// finds in `y`. Pairs without matches keep an empty gold set.
pub fn augment_pairs(pairs: &[Pair], lexicon: &[LexiconEntry], domain: Domain) -> Vec<Instance> {
    let matcher = OvcMatcher::for_domain(domain);
    pairs
        .iter()
        .map(|p| Instance {
            x: p.x.clone(),
            y: p.y.clone(),
            k_gold: lexicon.iter().filter(|e| matcher.matches(&p.y, &e.value)).cloned().collect(),
            domain,
        })
        .collect()
}

/// Reads a line-delimited JSON file, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, CorpusError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        let line = serde_json::to_string(row).map_err(std::io::Error::from)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FLOAT_DOC: &str = "class float([x])\nReturn a floating point number constructed from a number or string x.\n\nIf the argument is a string, it should contain a decimal number, optionally preceded by a sign, and optionally embedded in whitespace. The optional sign may be '+' or '-'.";

    fn doc(id: &str, text: &str, domain: Domain) -> DocRecord {
        DocRecord { construct_id: id.into(), doc_text: text.into(), domain }
    }

    #[test]
    fn first_chars_spans_lines() {
        let docs = [doc("python.library.functions#float", FLOAT_DOC, Domain::Code)];
        let (lex, warnings) = build_lexicon_from_docs(&docs, ExcerptMode::FirstChars, 200).unwrap();
        assert!(warnings.is_empty());
        assert!(lex[0].key.starts_with("class float([x]) Return a floating point number constructed from"));
        assert_eq!(lex[0].value, "python.library.functions#float");
        assert_eq!(lex[0].key, normalize_text(&FLOAT_DOC.chars().take(200).collect::<String>()));
    }

    #[test]
    fn first_chars_counts_scalars_not_bytes() {
        let docs = [doc("f", "αβγδε ζ", Domain::Other)];
        let (lex, _) = build_lexicon_from_docs(&docs, ExcerptMode::FirstChars, 3).unwrap();
        assert_eq!(lex[0].key, "αβγ");
    }

    #[test]
    fn short_doc_is_kept_whole() {
        let docs = [doc("f", "short doc", Domain::Other)];
        let (lex, _) = build_lexicon_from_docs(&docs, ExcerptMode::FirstChars, 200).unwrap();
        assert_eq!(lex[0].key, "short doc");
        assert!(matches!(
            build_lexicon_from_docs(&docs, ExcerptMode::FirstChars, 0),
            Err(CorpusError::ZeroLength)
        ));
    }

    #[test]
    fn first_line_of_tldr_page() {
        let text = "Delete IPC (Inter-process Communication) resources.\nMore information: https://manned.org/ipcrm.";
        let (lex, _) = build_lexicon_from_docs(&[doc("ipcrm", text, Domain::Cmd)], ExcerptMode::FirstLine, 0).unwrap();
        assert_eq!(lex[0].key, "Delete IPC (Inter-process Communication) resources.");
        assert_eq!(lex[0].value, "ipcrm");
        assert_eq!(lex[0].source, Source::Ingested);
    }

    #[test]
    fn blank_doc_is_skipped_with_warning() {
        let docs = [doc("a", " \n\n", Domain::Cmd), doc("b", "Do b.", Domain::Cmd)];
        let (lex, warnings) = build_lexicon_from_docs(&docs, ExcerptMode::FirstLine, 0).unwrap();
        assert_eq!(lex.len(), 1);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].construct_id, "a");
    }

    #[test]
    fn augment_attaches_matching_entries() {
        let lexicon = [
            LexiconEntry::new("Delete IPC (Inter-process Communication) resources.", "ipcrm", Domain::Cmd, Source::Ingested),
            LexiconEntry::new("Remove files or directories.", "rm", Domain::Cmd, Source::Ingested),
        ];
        let pairs = [
            Pair { x: "Delete a shared memory segment by id".into(), y: "ipcrm --shmem-id {{shmem_id}}".into() },
            Pair { x: "List files".into(), y: "ls -la".into() },
        ];
        let out = augment_pairs(&pairs, &lexicon, Domain::Cmd);
        assert_eq!(out[0].k_gold, vec![lexicon[0].clone()]);
        assert!(out[1].k_gold.is_empty());
    }
}
