//! Expert lexicon store.
//!
//! A [`KnowledgeBase`] is the append-only, deduplicated collection of
//! [`LexiconEntry`] values accumulated during one episode. Every inserted
//! entry receives a sequence number equal to its position, so `seq` values
//! always form `0..len`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Domain {
    Ltl,
    Code,
    Cmd,
    Other,
}

impl Default for Domain {
    fn default() -> Self {
        Domain::Other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Source {
    Gold,
    ExpertUi,
    Ingested,
    Distractor,
}

impl Default for Source {
    fn default() -> Self {
        Source::Gold
    }
}

/// How two entries are decided to be "the same" knowledge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IdentityMode {
    /// Normalized `(key, value)` pair.
    #[default]
    Pair,
    /// Normalized value only: one entry per formal construct.
    Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Identity {
    Pair(String, String),
    Value(String),
}

/// Which field of an entry failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryField {
    Key,
    Value,
}

impl fmt::Display for EntryField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryField::Key => f.write_str("key"),
            EntryField::Value => f.write_str("value"),
        }
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("entry {index}: {field} is empty after normalization")]
    EmptyField { index: usize, field: EntryField },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trim and collapse internal whitespace runs to a single space.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One expert knowledge unit: NL key phrase mapped to a formal construct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub key: String,
    pub value: String,
    #[serde(default)]
    pub domain: Domain,
    #[serde(default)]
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

impl LexiconEntry {
    pub fn new(key: &str, value: &str, domain: Domain, source: Source) -> Self {
        Self {
            key: normalize_text(key),
            value: normalize_text(value),
            domain,
            source,
            seq: None,
        }
    }

    /// Normalizes in place and rejects empty fields. `index` is reported in
    /// the error so callers can point at the offending record.
    pub fn normalized(mut self, index: usize) -> Result<Self, LexiconError> {
        self.key = normalize_text(&self.key);
        self.value = normalize_text(&self.value);
        if self.key.is_empty() {
            return Err(LexiconError::EmptyField { index, field: EntryField::Key });
        }
        if self.value.is_empty() {
            return Err(LexiconError::EmptyField { index, field: EntryField::Value });
        }
        Ok(self)
    }

    pub fn is_genuine(&self) -> bool {
        self.source != Source::Distractor
    }

    /// Keys are case-folded for identity; values are formal constructs and
    /// stay case-sensitive.
    pub fn identity(&self, mode: IdentityMode) -> Identity {
        let value = normalize_text(&self.value);
        match mode {
            IdentityMode::Pair => Identity::Pair(normalize_text(&self.key).to_lowercase(), value),
            IdentityMode::Value => Identity::Value(value),
        }
    }
}

impl fmt::Display for LexiconEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} => {}", self.key, self.value)
    }
}

/// An immutable view of a knowledge base at one point in time.
///
/// `snapshot_seq` is the next sequence number the base would assign, so every
/// entry in the snapshot has `seq < snapshot_seq` and every later entry has
/// `seq >= snapshot_seq`.
#[derive(Debug, Clone)]
pub struct KbSnapshot {
    pub entries: Arc<[LexiconEntry]>,
    pub snapshot_seq: u64,
    pub identity_mode: IdentityMode,
}

impl KbSnapshot {
    pub fn empty(identity_mode: IdentityMode) -> Self {
        Self { entries: Arc::from(Vec::new()), snapshot_seq: 0, identity_mode }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Serializes as `{identity_mode, entries}`; deserializing re-validates
/// uniqueness and `seq` order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(try_from = "KbRepr", into = "KbRepr")]
pub struct KnowledgeBase {
    entries: Vec<LexiconEntry>,
    identity_mode: IdentityMode,
    known: HashSet<Identity>,
}

#[derive(Serialize, Deserialize)]
struct KbRepr {
    identity_mode: IdentityMode,
    entries: Vec<LexiconEntry>,
}

impl From<KnowledgeBase> for KbRepr {
    fn from(kb: KnowledgeBase) -> Self {
        Self { identity_mode: kb.identity_mode, entries: kb.entries }
    }
}

impl TryFrom<KbRepr> for KnowledgeBase {
    type Error = LexiconError;

    fn try_from(repr: KbRepr) -> Result<Self, LexiconError> {
        let mut kb = KnowledgeBase::new(repr.identity_mode);
        for (i, entry) in repr.entries.into_iter().enumerate() {
            if entry.seq.is_some_and(|s| s != i as u64) || kb.contains(&entry) {
                return Err(LexiconError::Malformed { line: i + 1, message: format!("entry `{entry}` out of order or duplicated") });
            }
            kb.insert([entry])?;
        }
        Ok(kb)
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    identity_mode: IdentityMode,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.identity_mode == other.identity_mode && self.entries == other.entries
    }
}

impl KnowledgeBase {
    pub fn new(identity_mode: IdentityMode) -> Self {
        Self { entries: Vec::new(), identity_mode, known: HashSet::new() }
    }

    pub fn identity_mode(&self) -> IdentityMode {
        self.identity_mode
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, entry: &LexiconEntry) -> bool {
        self.known.contains(&entry.identity(self.identity_mode))
    }

    pub fn snapshot(&self) -> KbSnapshot {
        KbSnapshot {
            entries: Arc::from(self.entries.clone()),
            snapshot_seq: self.entries.len() as u64,
            identity_mode: self.identity_mode,
        }
    }

    /// Appends the entries whose identity is new and returns how many were
    /// added. The whole batch is validated first: on error nothing changes.
    pub fn add_entries<I>(&mut self, new: I) -> Result<usize, LexiconError>
    where
        I: IntoIterator<Item = LexiconEntry>,
    {
        self.insert(new).map(|added| added.len())
    }

    /// Like [`add_entries`](Self::add_entries) but returns the appended
    /// entries with their assigned `seq`.
    pub fn insert<I>(&mut self, new: I) -> Result<Vec<LexiconEntry>, LexiconError>
    where
        I: IntoIterator<Item = LexiconEntry>,
    {
        let batch = new
            .into_iter()
            .enumerate()
            .map(|(i, e)| e.normalized(i))
            .collect::<Result<Vec<_>, _>>()?;

        let mut added = Vec::new();
        for mut entry in batch {
            let id = entry.identity(self.identity_mode);
            if self.known.contains(&id) {
                continue;
            }
            self.known.insert(id);
            entry.seq = Some(self.entries.len() as u64);
            self.entries.push(entry.clone());
            added.push(entry);
        }
        Ok(added)
    }

    /// Gold entries whose identity is absent from this base, in gold order.
    pub fn difference(&self, gold: &[LexiconEntry]) -> Vec<LexiconEntry> {
        difference(gold, self)
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), LexiconError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// Line-delimited JSON: one header line carrying the identity mode, then
    /// one entry per line.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), LexiconError> {
        let header = serde_json::to_string(&FileHeader { identity_mode: self.identity_mode })
            .map_err(io_err)?;
        writeln!(out, "{header}")?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(io_err)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LexiconError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Reads a knowledge-base file. The header line is optional (identity
    /// defaults to PAIR). Entries must be unique and their `seq`, when present,
    /// must match their position.
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, LexiconError> {
        let mut kb: Option<KnowledgeBase> = None;
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if kb.is_none() {
                if let Ok(header) = serde_json::from_str::<FileHeader>(&line) {
                    kb = Some(KnowledgeBase::new(header.identity_mode));
                    continue;
                }
            }
            let kb = kb.get_or_insert_with(|| KnowledgeBase::new(IdentityMode::Pair));
            let entry = parse_entry_line(&line, line_no)?;
            let expected = kb.len() as u64;
            if let Some(seq) = entry.seq {
                if seq != expected {
                    return Err(LexiconError::Malformed {
                        line: line_no,
                        message: format!("seq {seq} out of order, expected {expected}"),
                    });
                }
            }
            if kb.contains(&entry) {
                return Err(LexiconError::Malformed {
                    line: line_no,
                    message: format!("duplicate entry `{entry}`"),
                });
            }
            kb.insert([entry]).map_err(|e| LexiconError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        Ok(kb.unwrap_or_default())
    }
}

/// Gold entries whose identity is absent from `kb`, preserving gold order.
/// Duplicates within `gold` are reported once.
pub fn difference(gold: &[LexiconEntry], kb: &KnowledgeBase) -> Vec<LexiconEntry> {
    let mut seen = HashSet::new();
    gold.iter()
        .filter(|e| {
            let id = e.identity(kb.identity_mode);
            !kb.known.contains(&id) && seen.insert(id)
        })
        .cloned()
        .collect()
}

fn parse_entry_line(line: &str, line_no: usize) -> Result<LexiconEntry, LexiconError> {
    let entry: LexiconEntry = serde_json::from_str(line).map_err(|e| LexiconError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    entry.normalized(0).map_err(|e| match e {
        LexiconError::EmptyField { field, .. } => LexiconError::Malformed {
            line: line_no,
            message: format!("{field} is empty"),
        },
        other => other,
    })
}

/// Reads a plain list of entries (no header, duplicates allowed), as produced
/// by lexicon builders.
pub fn read_entries(path: impl AsRef<Path>) -> Result<Vec<LexiconEntry>, LexiconError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && serde_json::from_str::<FileHeader>(&line).is_ok() {
            continue;
        }
        out.push(parse_entry_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn write_entries(path: impl AsRef<Path>, entries: &[LexiconEntry]) -> Result<(), LexiconError> {
    let mut out = BufWriter::new(File::create(path)?);
    for entry in entries {
        writeln!(out, "{}", serde_json::to_string(entry).map_err(io_err)?)?;
    }
    out.flush()?;
    Ok(())
}

fn io_err(e: serde_json::Error) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ltl(key: &str, value: &str) -> LexiconEntry {
        LexiconEntry::new(key, value, Domain::Ltl, Source::Gold)
    }

    #[test]
    fn adds_table_one_entries() {
        let mut kb = KnowledgeBase::new(IdentityMode::Pair);
        let n = kb
            .add_entries([ltl("current filehandle", "cfh"), ltl("A is a regular file", "is_regular(A)")])
            .unwrap();
        assert_eq!(n, 2);
        assert_eq!(kb.entries()[1].seq, Some(1));
    }

    #[test]
    fn duplicate_pair_is_skipped() {
        let mut kb = KnowledgeBase::new(IdentityMode::Pair);
        kb.add_entries([ltl("current filehandle", "cfh")]).unwrap();
        let n = kb.add_entries([ltl("  Current   filehandle ", "cfh")]).unwrap();
        assert_eq!(n, 0);
        assert_eq!(kb.len(), 1);
    }

    #[test]
    fn value_identity_dedups_by_construct() {
        let mut kb = KnowledgeBase::new(IdentityMode::Value);
        kb.add_entries([ltl("A returned", "return(A)")]).unwrap();
        // identities: return(A) (existing), cfh, is_regular(A)
        let n = kb
            .add_entries([
                ltl("A is given back", "return(A)"),
                ltl("current filehandle", "cfh"),
                ltl("A is a regular file", "is_regular(A)"),
            ])
            .unwrap();
        assert_eq!(n, 2);
    }

    #[test]
    fn values_stay_case_sensitive() {
        let mut kb = KnowledgeBase::new(IdentityMode::Pair);
        let n = kb.add_entries([ltl("file handle", "FH"), ltl("FILE HANDLE", "fh")]).unwrap();
        assert_eq!(n, 2);
    }

    #[test]
    fn empty_value_rejected_atomically() {
        let mut kb = KnowledgeBase::new(IdentityMode::Pair);
        let err = kb.add_entries([ltl("ok", "ok"), ltl("bad", "   ")]).unwrap_err();
        assert!(matches!(err, LexiconError::EmptyField { index: 1, field: EntryField::Value }));
        assert!(kb.is_empty());
    }

    #[test]
    fn difference_cases() {
        let (a, b, c) = (ltl("a", "va"), ltl("b", "vb"), ltl("c", "vc"));
        let mut kb = KnowledgeBase::new(IdentityMode::Pair);
        let gold = vec![a.clone(), b.clone(), c.clone()];
        assert_eq!(kb.difference(&gold), gold);
        kb.add_entries([b]).unwrap();
        assert_eq!(kb.difference(&gold), vec![a, c]);
        kb.add_entries(gold.clone()).unwrap();
        assert!(kb.difference(&gold).is_empty());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let mut kb = KnowledgeBase::new(IdentityMode::Value);
        kb.add_entries([ltl("current filehandle", "cfh"), ltl("A returned", "return(A)")]).unwrap();
        kb.persist(&path).unwrap();
        assert_eq!(KnowledgeBase::load(&path).unwrap(), kb);
    }

    #[test]
    fn blank_value_reports_line() {
        let text = "{\"identity_mode\":\"PAIR\"}\n\
                    {\"key\":\"a\",\"value\":\"x\",\"domain\":\"LTL\",\"source\":\"GOLD\",\"seq\":0}\n\
                    {\"key\":\"b\",\"value\":\" \",\"domain\":\"LTL\",\"source\":\"GOLD\",\"seq\":1}\n";
        let err = KnowledgeBase::read_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, LexiconError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn out_of_order_seq_is_malformed() {
        let text = "{\"key\":\"a\",\"value\":\"x\",\"seq\":4}\n";
        let err = KnowledgeBase::read_from(text.as_bytes()).unwrap_err();
        assert!(matches!(err, LexiconError::Malformed { line: 1, .. }));
    }

    fn arb_entry() -> impl Strategy<Value = LexiconEntry> {
        ("[a-c ]{0,4}", "[x-z]{0,2}").prop_map(|(k, v)| ltl(&k, &v))
    }

    proptest! {
        #[test]
        fn kb_invariants_hold(batches in prop::collection::vec(prop::collection::vec(arb_entry(), 0..6), 0..8),
                              value_mode in any::<bool>()) {
            let mode = if value_mode { IdentityMode::Value } else { IdentityMode::Pair };
            let mut kb = KnowledgeBase::new(mode);
            let mut prev = 0;
            for batch in &batches {
                let before = kb.clone();
                let k_new = kb.difference(batch);
                match kb.add_entries(batch.clone()) {
                    Ok(n) => {
                        prop_assert_eq!(n, k_new.len());
                        prop_assert_eq!(kb.len(), prev + n);
                        prop_assert!(kb.difference(batch).is_empty());
                        // idempotence
                        prop_assert_eq!(kb.add_entries(batch.clone()).unwrap(), 0);
                    }
                    Err(_) => prop_assert_eq!(&kb, &before),
                }
                prop_assert!(kb.len() >= prev);
                prev = kb.len();
            }
            for (i, e) in kb.entries().iter().enumerate() {
                prop_assert_eq!(e.seq, Some(i as u64));
            }
        }
    }
}
