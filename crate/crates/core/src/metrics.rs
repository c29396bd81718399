//! Parse-quality and expert-effort metrics.
//!
//! BLEU is computed at corpus level over the domain tokenizer. OVC metrics
//! use an [`OvcMatcher`] that finds lexicon values in generated text; the
//! same matcher builds gold sets during corpus ingestion so scoring and gold
//! construction never diverge.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::ParseRecord;
use crate::lexicon::{Domain, LexiconEntry};

/// Replacement numerator for zero n-gram matches under [`Smoothing::AddEps`].
pub const SMOOTHING_EPSILON: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("hypothesis list is empty")]
    NoHypotheses,
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("max_n must be at least 1")]
    BadOrder,
    #[error("baseline total cost is zero")]
    ZeroBaseline,
}

// ---------------------------------------------------------------------------
// Tokenizers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    /// Whitespace split, then every non-word character is its own token.
    /// Used for LTL and shell commands.
    FormalV1,
    /// Identifier runs plus a fixed set of multi-character operators; every
    /// other symbol is a single token. Used for code.
    CodeV1,
}

const CODE_OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "==", "!=", "<=", ">=", "**", "//", "->", "+=", "-=", "*=", "/=",
    "%=", "&=", "|=", "^=", ">>", "<<", ":=",
];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

impl Tokenizer {
    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Code => Tokenizer::CodeV1,
            _ => Tokenizer::FormalV1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tokenizer::FormalV1 => "formal-v1",
            Tokenizer::CodeV1 => "code-v1",
        }
    }

    pub fn tokenize(self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let mut rest = chunk;
            while let Some(c) = rest.chars().next() {
                if is_word_char(c) {
                    let end = rest.find(|c: char| !is_word_char(c)).unwrap_or(rest.len());
                    out.push(rest[..end].to_string());
                    rest = &rest[end..];
                    continue;
                }
                if self == Tokenizer::CodeV1 {
                    if let Some(op) = CODE_OPERATORS.iter().find(|op| rest.starts_with(**op)) {
                        out.push((*op).to_string());
                        rest = &rest[op.len()..];
                        continue;
                    }
                }
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// BLEU

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Smoothing {
    #[default]
    None,
    AddEps,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU on pre-tokenized segments, in `[0, 100]`.
pub fn bleu_tokens(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, MetricsError> {
    if hypotheses.is_empty() {
        return Err(MetricsError::NoHypotheses);
    }
    if hypotheses.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if max_n == 0 {
        return Err(MetricsError::BadOrder);
    }

    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }

    let weight = 1.0 / max_n as f64;
    let mut log_sum = 0.0;
    for (m, t) in matches.iter().zip(&totals) {
        let numerator = match (*m, smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::AddEps) => SMOOTHING_EPSILON,
            (m, _) => m as f64,
        };
        log_sum += weight * (numerator / (*t).max(1) as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    Ok(100.0 * bp * log_sum.exp())
}

pub fn bleu(
    hypotheses: &[&str],
    references: &[&str],
    tokenizer: Tokenizer,
    max_n: usize,
    smoothing: Smoothing,
) -> Result<f64, MetricsError> {
    let tok = |xs: &[&str]| xs.iter().map(|s| tokenizer.tokenize(s)).collect::<Vec<_>>();
    bleu_tokens(&tok(hypotheses), &tok(references), max_n, smoothing)
}

// ---------------------------------------------------------------------------
// OVC matching

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatchRule {
    /// Pattern must be delimited by non-word characters (word characters here
    /// include `-`, so `rm` does not match inside `ipcrm` or `rm-rf`).
    WordBoundary,
    /// Call-shaped patterns (`head(args)`) match `head` followed by `(`;
    /// bare identifiers match at identifier boundaries.
    CallHead,
    Substring,
}

/// How a lexicon value is turned into the pattern searched for in text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValueNormalizer {
    Verbatim,
    /// `is_regular(A)` -> `is_regular`.
    StripArgs,
    /// `python.library.functions#float` -> `float`, `numpy.dot` -> `dot`.
    LastSegment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OvcMatcherConfig {
    pub domain: Domain,
    pub match_rule: MatchRule,
    pub value_normalizer: ValueNormalizer,
}

impl OvcMatcherConfig {
    pub fn for_domain(domain: Domain) -> Self {
        let (match_rule, value_normalizer) = match domain {
            Domain::Ltl => (MatchRule::CallHead, ValueNormalizer::StripArgs),
            Domain::Code => (MatchRule::CallHead, ValueNormalizer::LastSegment),
            Domain::Cmd => (MatchRule::WordBoundary, ValueNormalizer::Verbatim),
            Domain::Other => (MatchRule::Substring, ValueNormalizer::Verbatim),
        };
        Self { domain, match_rule, value_normalizer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OvcMatcher {
    pub config: OvcMatcherConfig,
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn is_command_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

fn bounded(text: &str, range: &Range<usize>, inner: fn(char) -> bool) -> bool {
    let before = text[..range.start].chars().next_back();
    let after = text[range.end..].chars().next();
    !before.is_some_and(inner) && !after.is_some_and(inner)
}

impl OvcMatcher {
    pub fn new(config: OvcMatcherConfig) -> Self {
        Self { config }
    }

    pub fn for_domain(domain: Domain) -> Self {
        Self::new(OvcMatcherConfig::for_domain(domain))
    }

    /// The searched pattern and whether the value is call-shaped.
    pub fn pattern(&self, value: &str) -> (String, bool) {
        let value = value.trim();
        let call_shaped = value.ends_with(')') && value.find('(').is_some_and(|i| i > 0);
        let pattern = match self.config.value_normalizer {
            ValueNormalizer::Verbatim => value,
            ValueNormalizer::StripArgs => match value.find('(') {
                Some(i) if i > 0 => value[..i].trim_end(),
                _ => value,
            },
            ValueNormalizer::LastSegment => {
                let tail = value.rsplit('#').next().unwrap_or(value);
                tail.rsplit('.').next().unwrap_or(tail)
            }
        };
        let call = match self.config.value_normalizer {
            ValueNormalizer::StripArgs => call_shaped,
            ValueNormalizer::LastSegment => true,
            ValueNormalizer::Verbatim => false,
        };
        (pattern.to_string(), call)
    }

    /// Byte ranges in `text` where `value`'s pattern occurs. For call-shaped
    /// matches the range covers the head identifier only.
    pub fn find_spans(&self, text: &str, value: &str) -> Vec<Range<usize>> {
        let (pattern, call) = self.pattern(value);
        if pattern.is_empty() {
            return Vec::new();
        }
        text.match_indices(pattern.as_str())
            .map(|(start, m)| start..start + m.len())
            .filter(|r| match self.config.match_rule {
                MatchRule::Substring => true,
                MatchRule::WordBoundary => bounded(text, r, is_command_char),
                MatchRule::CallHead => {
                    if !bounded(text, r, is_ident_char) {
                        return false;
                    }
                    !call || text[r.end..].trim_start().starts_with('(')
                }
            })
            .collect()
    }

    pub fn matches(&self, text: &str, value: &str) -> bool {
        !self.find_spans(text, value).is_empty()
    }

    /// Values of `lexicon` whose pattern occurs in `text`.
    pub fn extract<'a, I>(&self, text: &str, lexicon: I) -> BTreeSet<String>
    where
        I: IntoIterator<Item = &'a LexiconEntry>,
    {
        lexicon
            .into_iter()
            .filter(|e| self.matches(text, &e.value))
            .map(|e| e.value.clone())
            .collect()
    }
}

pub fn extract_ovcs(text: &str, lexicon: &[LexiconEntry], matcher: &OvcMatcher) -> BTreeSet<String> {
    matcher.extract(text, lexicon)
}

// ---------------------------------------------------------------------------
// Precision / recall / F1

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold set was empty, so recall is defined rather than measured.
    pub vacuous_gold: bool,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unordered P/R/F1 from raw counts.
pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let gold = tp + fn_;
    let pred = tp + fp;
    if gold == 0 {
        let precision = if pred == 0 { 1.0 } else { 0.0 };
        return Prf { precision, recall: 1.0, f1: f1(precision, 1.0), vacuous_gold: true };
    }
    let precision = if pred == 0 { 0.0 } else { tp as f64 / pred as f64 };
    let recall = tp as f64 / gold as f64;
    Prf { precision, recall, f1: f1(precision, recall), vacuous_gold: false }
}

pub fn ovc_prf(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> Prf {
    let tp = pred.intersection(gold).count();
    prf_from_counts(tp, pred.len() - tp, gold.len() - tp)
}

// ---------------------------------------------------------------------------
// Effort cost

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EffortCost {
    pub reading: u64,
    pub error: u64,
    pub total: u64,
}

impl EffortCost {
    pub fn new(reading: u64, error: u64) -> Self {
        Self { reading, error, total: reading + error }
    }
}

impl std::ops::Add for EffortCost {
    type Output = EffortCost;
    fn add(self, rhs: Self) -> Self {
        EffortCost::new(self.reading + rhs.reading, self.error + rhs.error)
    }
}

/// One unit per parse read plus one unit per missed gold OVC.
pub fn effort_cost(records: &[ParseRecord]) -> EffortCost {
    let error = records
        .iter()
        .map(|r| r.ovc_gold.difference(&r.ovc_pred).count() as u64)
        .sum();
    EffortCost::new(records.len() as u64, error)
}

/// Percentage cost reduction of an augmented run relative to a baseline.
/// Negative when the augmented run costs more.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction(pub f64);

impl Reduction {
    pub fn percent(self) -> f64 {
        self.0
    }

    /// Rounded to one decimal place, as reported.
    pub fn rounded(self) -> f64 {
        (self.0 * 10.0).round() / 10.0
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}%", self.0)
    }
}

pub fn reduction(total_base: u64, total_augmented: u64) -> Result<Reduction, MetricsError> {
    if total_base == 0 {
        return Err(MetricsError::ZeroBaseline);
    }
    let base = total_base as f64;
    Ok(Reduction(100.0 * (base - total_augmented as f64) / base))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReuseSummary {
    pub unique_constructs: usize,
    pub occurrences: usize,
    pub reuse_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tokenizers: Vec<String>,
    pub bleu_max_n: usize,
    pub bleu_smoothing: Smoothing,
    /// OVC metrics pool true/false positives over all steps.
    pub ovc_averaging: String,
    pub vacuous_gold_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub steps: usize,
    pub corpus_bleu: f64,
    pub ovc_precision: f64,
    pub ovc_recall: f64,
    pub ovc_f1: f64,
    /// Recall over gold constructs seen for the first time in the episode.
    pub ovc_recall_first_occurrence: Option<f64>,
    /// Recall over gold constructs that already occurred at an earlier step.
    pub ovc_recall_repeat: Option<f64>,
    pub reading_cost: u64,
    pub error_cost: u64,
    pub total_cost: u64,
    pub kb_size_final: usize,
    pub reuse: ReuseSummary,
    pub meta: ReportMeta,
}

impl EpisodeReport {
    pub fn from_records(records: &[ParseRecord], domain: Domain) -> Self {
        let tokenizer = Tokenizer::for_domain(domain);
        let hyps: Vec<_> = records.iter().map(|r| tokenizer.tokenize(&r.y_hat)).collect();
        let refs: Vec<_> = records.iter().map(|r| tokenizer.tokenize(&r.gold_y)).collect();
        let corpus_bleu = bleu_tokens(&hyps, &refs, 4, Smoothing::None).unwrap_or(0.0);

        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        let mut vacuous = 0;
        let mut seen = BTreeSet::new();
        let (mut first_hit, mut first_total, mut repeat_hit, mut repeat_total) = (0, 0, 0, 0);
        for r in records {
            let hit = r.ovc_pred.intersection(&r.ovc_gold).count();
            tp += hit;
            fp += r.ovc_pred.len() - hit;
            fn_ += r.ovc_gold.len() - hit;
            if r.ovc_gold.is_empty() {
                vacuous += 1;
            }
            for c in &r.ovc_gold {
                let correct = r.ovc_pred.contains(c) as usize;
                if seen.contains(c) {
                    repeat_total += 1;
                    repeat_hit += correct;
                } else {
                    first_total += 1;
                    first_hit += correct;
                }
            }
            seen.extend(r.ovc_gold.iter().cloned());
        }
        let prf = prf_from_counts(tp, fp, fn_);
        let cost = effort_cost(records);
        let ratio = |h: usize, t: usize| (t > 0).then(|| h as f64 / t as f64);
        let occurrences = first_total + repeat_total;

        EpisodeReport {
            steps: records.len(),
            corpus_bleu,
            ovc_precision: prf.precision,
            ovc_recall: prf.recall,
            ovc_f1: prf.f1,
            ovc_recall_first_occurrence: ratio(first_hit, first_total),
            ovc_recall_repeat: ratio(repeat_hit, repeat_total),
            reading_cost: cost.reading,
            error_cost: cost.error,
            total_cost: cost.total,
            kb_size_final: records.last().map_or(0, |r| r.kb_size_after),
            reuse: ReuseSummary {
                unique_constructs: first_total,
                occurrences,
                reuse_fraction: if occurrences == 0 {
                    0.0
                } else {
                    repeat_total as f64 / occurrences as f64
                },
            },
            meta: ReportMeta {
                tokenizers: vec![tokenizer.name().to_string()],
                bleu_max_n: 4,
                bleu_smoothing: Smoothing::None,
                ovc_averaging: "micro".to_string(),
                vacuous_gold_steps: vacuous,
            },
        }
    }

    pub fn cost(&self) -> EffortCost {
        EffortCost::new(self.reading_cost, self.error_cost)
    }
}

/// Plain-text cost table with Reading, Error, Total and Reduction columns.
/// The reduction column is shown as a negative change relative to the
/// baseline row.
pub fn cost_table(baseline: Option<(&str, EffortCost)>, run: (&str, EffortCost)) -> String {
    let row = |name: &str, cost: EffortCost, red: String| {
        format!("{:<16} {:>8} {:>8} {:>8} {:>10}\n", name, cost.reading, cost.error, cost.total, red)
    };
    let mut out = format!("{:<16} {:>8} {:>8} {:>8} {:>10}\n", "Run", "Reading", "Error", "Total", "Reduction");
    let mut red = String::new();
    if let Some((name, base)) = baseline {
        out.push_str(&row(name, base, String::new()));
        if let Ok(r) = reduction(base.total, run.1.total) {
            red = format!("{:.1}%", -r.percent());
        }
    }
    out.push_str(&row(run.0, run.1, red));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::Source;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn entry(key: &str, value: &str, domain: Domain) -> LexiconEntry {
        LexiconEntry::new(key, value, domain, Source::Gold)
    }

    #[test]
    fn bleu_identity_is_exactly_100() {
        let s = "G( is_regular(cfh) ⟹ return(error) )";
        assert_eq!(bleu(&[s], &[s], Tokenizer::FormalV1, 4, Smoothing::None).unwrap(), 100.0);
    }

    #[test]
    fn bleu_brevity_case() {
        let b = bleu(&["a b c"], &["a b c d"], Tokenizer::FormalV1, 2, Smoothing::None).unwrap();
        let expected = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        assert!((b - expected).abs() < 1e-9);
        assert!((b - 71.653).abs() < 1e-3);
    }

    #[test]
    fn bleu_zero_fourgram_overlap() {
        let b = bleu(&["a b c d"], &["a b c e"], Tokenizer::FormalV1, 4, Smoothing::None).unwrap();
        assert_eq!(b, 0.0);
        let s = bleu(&["a b c d"], &["a b c e"], Tokenizer::FormalV1, 4, Smoothing::AddEps).unwrap();
        assert!(s > 0.0 && s < 100.0);
    }

    #[test]
    fn bleu_errors() {
        assert_eq!(bleu(&[], &[], Tokenizer::FormalV1, 4, Smoothing::None), Err(MetricsError::NoHypotheses));
        assert!(matches!(
            bleu(&["a"], &["a", "b"], Tokenizer::FormalV1, 4, Smoothing::None),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert_eq!(bleu(&["a"], &["a"], Tokenizer::FormalV1, 0, Smoothing::None), Err(MetricsError::BadOrder));
    }

    #[test]
    fn tokenizers_split_operators() {
        assert_eq!(Tokenizer::FormalV1.tokenize("G( !(x) )"), ["G", "(", "!", "(", "x", ")", ")"]);
        assert_eq!(Tokenizer::CodeV1.tokenize("a!=b**2"), ["a", "!=", "b", "**", "2"]);
    }

    #[test]
    fn extracts_table_one_constructs() {
        let lex = [
            entry("current filehandle", "cfh", Domain::Ltl),
            entry("A is a regular file", "is_regular(A)", Domain::Ltl),
            entry("A returned", "return(A)", Domain::Ltl),
        ];
        let text = "ALWAYS(( !(is_regular(cfh)) ) ⟹ ( return(error) ) )";
        let got = extract_ovcs(text, &lex, &OvcMatcher::for_domain(Domain::Ltl));
        assert_eq!(got, set(&["cfh", "is_regular(A)", "return(A)"]));
        assert!(extract_ovcs("G( var )", &lex, &OvcMatcher::for_domain(Domain::Ltl)).is_empty());
    }

    #[test]
    fn call_head_requires_paren() {
        let lex = [entry("A returned", "return(A)", Domain::Ltl)];
        let m = OvcMatcher::for_domain(Domain::Ltl);
        assert!(extract_ovcs("G( return_code )", &lex, &m).is_empty());
        assert!(extract_ovcs("G( x ∧ return )", &lex, &m).is_empty());
    }

    #[test]
    fn word_boundary_command_names() {
        let lex = [entry("Delete IPC resources.", "ipcrm", Domain::Cmd), entry("Remove files", "rm", Domain::Cmd)];
        let got = extract_ovcs("ipcrm --shmem-id x", &lex, &OvcMatcher::for_domain(Domain::Cmd));
        assert_eq!(got, set(&["ipcrm"]));
    }

    #[test]
    fn code_values_match_by_last_segment() {
        let lex = [
            entry("class float([x]) Return ...", "python.library.functions#float", Domain::Code),
            entry("Dot product of two arrays", "numpy.dot", Domain::Code),
        ];
        let m = OvcMatcher::for_domain(Domain::Code);
        assert_eq!(extract_ovcs("{k: (float(d2[k]) / d1[k]) for k in d2}", &lex, &m), set(&["python.library.functions#float"]));
        assert_eq!(extract_ovcs("np.dot(a[:, (None)], b[(None), :])", &lex, &m), set(&["numpy.dot"]));
        assert!(extract_ovcs("x = dotted", &lex, &m).is_empty());
    }

    #[test]
    fn prf_cases() {
        let p = ovc_prf(&set(&["numpy.dot"]), &set(&["numpy.dot"]));
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = ovc_prf(&set(&["a", "b", "d"]), &set(&["a", "b", "c"]));
        for v in [p.precision, p.recall, p.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
        let p = ovc_prf(&set(&[]), &set(&["a"]));
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn prf_vacuous_gold() {
        let p = ovc_prf(&set(&[]), &set(&[]));
        assert_eq!((p.precision, p.recall, p.f1, p.vacuous_gold), (1.0, 1.0, 1.0, true));
        let p = ovc_prf(&set(&["a"]), &set(&[]));
        assert_eq!((p.precision, p.recall, p.f1, p.vacuous_gold), (0.0, 1.0, 0.0, true));
    }

    #[test]
    fn reductions_from_cost_table() {
        for (base, aug, want) in [(280, 212, 24.3), (1806, 1511, 16.3), (237, 159, 32.9), (888, 838, 5.6)] {
            let r = reduction(base, aug).unwrap();
            assert_eq!(r.rounded(), want);
            assert!((r.percent() - want).abs() < 0.05);
            let back = base as f64 * (1.0 - r.percent() / 100.0);
            assert!((back - aug as f64).abs() < 1e-9);
        }
        assert!(reduction(100, 120).unwrap().percent() < 0.0);
        assert_eq!(reduction(0, 1), Err(MetricsError::ZeroBaseline));
    }

    #[test]
    fn effort_cost_values() {
        assert_eq!(EffortCost::new(100, 180).total, 280);
        assert_eq!(EffortCost::new(543, 295).total, 838);
        assert_eq!(effort_cost(&[]), EffortCost::new(0, 0));
    }
}
