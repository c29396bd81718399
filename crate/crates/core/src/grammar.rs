//! Synthetic (NL, LTL, lexicon) generation from a context-free grammar.
//!
//! Each production carries a formal template and one or more English
//! templates with slots aligned to its nonterminals, so a single derivation
//! yields both the formal statement `y` and the sentence `x`. Lexical classes
//! (verbs, nouns, variables, numbers) are leaves filled from pools; entries
//! drawn from *open* classes become gold lexicon entries.
//!
//! [`Grammar::validate`] is an Earley recognizer over the same productions,
//! with an alias table for alternative operator spellings and optional
//! grouping parentheses around selected nonterminals.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Instance;
use crate::lexicon::{Domain, LexiconEntry, Source};

/// Placeholder word that `{i(j)}` slot application replaces.
const ARG_PLACEHOLDER: &str = "A";

const BUILTIN_GRAMMAR: &str = include_str!("../data/nfs_ltl.toml");
const BUILTIN_FILES: &[(&str, &str)] = &[
    ("nfs_verbs.tsv", include_str!("../data/nfs_verbs.tsv")),
    ("nfs_nouns.tsv", include_str!("../data/nfs_nouns.tsv")),
    ("nfs_variables.tsv", include_str!("../data/nfs_variables.tsv")),
    ("nfs_get_vars.tsv", include_str!("../data/nfs_get_vars.tsv")),
];

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("invalid grammar: {0}")]
    Invalid(String),
    #[error("derivation exceeded max depth {max_depth} while expanding <{nonterminal}>")]
    MaxDepth { nonterminal: String, max_depth: usize },
    #[error("scripted derivation: {0}")]
    Script(String),
    #[error("requested {requested} distractors but only {available} non-gold pool entries exist")]
    DistractorPool { requested: usize, available: usize },
    #[error("dataset size must be at least 1")]
    EmptyDataset,
    #[error("grammar file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Grammar file schema

#[derive(Debug, Deserialize)]
struct GrammarFile {
    #[serde(default)]
    name: String,
    #[serde(default = "default_start")]
    start: String,
    #[serde(default = "default_max_depth")]
    max_depth: usize,
    #[serde(default)]
    groupable: Vec<String>,
    #[serde(default)]
    aliases: BTreeMap<String, String>,
    #[serde(default, rename = "class")]
    classes: Vec<ClassFile>,
    #[serde(rename = "rule")]
    rules: Vec<RuleFile>,
}

#[derive(Debug, Deserialize)]
struct ClassFile {
    name: String,
    #[serde(default)]
    open: bool,
    pool: Option<String>,
    items: Option<Vec<(String, String)>>,
    range: Option<(i64, i64)>,
}

#[derive(Debug, Deserialize)]
struct RuleFile {
    id: u32,
    lhs: String,
    rhs: String,
    nl: Vec<String>,
    #[serde(default = "default_weight")]
    weight: f64,
}

fn default_start() -> String {
    "start".into()
}
fn default_max_depth() -> usize {
    12
}
fn default_weight() -> f64 {
    1.0
}

// ---------------------------------------------------------------------------
// Compiled grammar

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Symbol(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum NlPart {
    Text(String),
    Slot(usize),
    Apply { pattern: usize, arg: usize },
}

#[derive(Debug, Clone)]
pub struct ProductionRule {
    pub id: u32,
    /// Position among the productions sharing `id`.
    pub alt: usize,
    pub lhs: String,
    pub rhs: Vec<Segment>,
    pub nl_templates: Vec<String>,
    pub weight: f64,
    nl: Vec<Vec<NlPart>>,
}

impl ProductionRule {
    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.rhs.iter().filter_map(|s| match s {
            Segment::Symbol(name) => Some(name.as_str()),
            Segment::Literal(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolItem {
    pub value: String,
    pub nl: String,
}

impl PoolItem {
    /// The token the item contributes to formal text: the value up to its
    /// argument list.
    pub fn head(&self) -> &str {
        match self.value.find('(') {
            Some(i) if i > 0 => &self.value[..i],
            _ => &self.value,
        }
    }
}

#[derive(Debug, Clone)]
pub enum ClassItems {
    Pool(Vec<PoolItem>),
    Range { min: i64, max: i64 },
}

#[derive(Debug, Clone)]
pub struct LexicalClass {
    pub name: String,
    pub open: bool,
    pub items: ClassItems,
}

impl LexicalClass {
    fn accepts(&self, token: &str) -> bool {
        match &self.items {
            ClassItems::Pool(items) => items.iter().any(|i| i.head() == token),
            ClassItems::Range { min, max } => token
                .parse::<i64>()
                .is_ok_and(|v| (*min..=*max).contains(&v) && token.chars().all(|c| c.is_ascii_digit())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Grammar {
    pub name: String,
    pub start: String,
    pub max_depth: usize,
    pub rules: Vec<ProductionRule>,
    pub classes: Vec<LexicalClass>,
    pub aliases: BTreeMap<String, String>,
    pub groupable: Vec<String>,
    by_lhs: HashMap<String, Vec<usize>>,
    class_index: HashMap<String, usize>,
}

fn parse_rhs(rhs: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut literal = String::new();
    let mut rest = rhs;
    while let Some(c) = rest.chars().next() {
        if c == '<' {
            let after = &rest[1..];
            let name_len = after
                .find(|c: char| !(c.is_alphanumeric() || c == '_'))
                .unwrap_or(after.len());
            if name_len > 0 && after[name_len..].starts_with('>') {
                if !literal.is_empty() {
                    out.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                out.push(Segment::Symbol(after[..name_len].to_string()));
                rest = &after[name_len + 1..];
                continue;
            }
        }
        literal.push(c);
        rest = &rest[c.len_utf8()..];
    }
    if !literal.is_empty() {
        out.push(Segment::Literal(literal));
    }
    out
}

fn parse_nl(template: &str) -> Result<Vec<NlPart>, String> {
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        text.push_str(&rest[..open]);
        let close = rest[open..]
            .find('}')
            .map(|i| open + i)
            .ok_or_else(|| format!("unclosed slot in `{template}`"))?;
        let inner = &rest[open + 1..close];
        if !text.is_empty() {
            parts.push(NlPart::Text(std::mem::take(&mut text)));
        }
        let slot = |s: &str| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| format!("bad slot `{{{inner}}}` in `{template}`"))
        };
        parts.push(match inner.split_once('(') {
            Some((p, a)) => NlPart::Apply {
                pattern: slot(p)?,
                arg: slot(a.strip_suffix(')').ok_or_else(|| format!("bad slot `{{{inner}}}`"))?)?,
            },
            None => NlPart::Slot(slot(inner)?),
        });
        rest = &rest[close + 1..];
    }
    text.push_str(rest);
    if !text.is_empty() {
        parts.push(NlPart::Text(text));
    }
    Ok(parts)
}

fn parse_pool(text: &str, source: &str) -> Result<Vec<PoolItem>, GrammarError> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (value, nl) = line.split_once('\t').ok_or_else(|| {
            GrammarError::Invalid(format!("{source}:{}: expected `value<TAB>phrase`", i + 1))
        })?;
        items.push(PoolItem { value: value.trim().to_string(), nl: nl.trim().to_string() });
    }
    Ok(items)
}

impl Grammar {
    /// The shipped NFS grammar with its pools.
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_GRAMMAR, |name| {
            BUILTIN_FILES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, text)| text.to_string())
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, name.to_string()))
        })
        .expect("builtin grammar is valid")
    }

    /// Loads a grammar file; pool paths resolve relative to its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GrammarError> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text, |name| fs::read_to_string(dir.join(name)))
    }

    pub fn from_toml_str<F>(text: &str, resolve: F) -> Result<Self, GrammarError>
    where
        F: Fn(&str) -> std::io::Result<String>,
    {
        let file: GrammarFile = toml::from_str(text)?;
        let invalid = |m: String| GrammarError::Invalid(m);

        let mut classes = Vec::new();
        for c in file.classes {
            let items = match (c.pool, c.items, c.range) {
                (Some(pool), None, None) => ClassItems::Pool(parse_pool(&resolve(&pool)?, &pool)?),
                (None, Some(items), None) => ClassItems::Pool(
                    items.into_iter().map(|(value, nl)| PoolItem { value, nl }).collect(),
                ),
                (None, None, Some((min, max))) => {
                    if min > max || min < 0 {
                        return Err(invalid(format!("class {}: bad range {min}..{max}", c.name)));
                    }
                    ClassItems::Range { min, max }
                }
                _ => {
                    return Err(invalid(format!(
                        "class {} needs exactly one of pool, items, range",
                        c.name
                    )))
                }
            };
            if let ClassItems::Pool(items) = &items {
                if items.is_empty() {
                    return Err(invalid(format!("class {} has an empty pool", c.name)));
                }
                if items.iter().any(|i| i.value.is_empty() || i.nl.is_empty()) {
                    return Err(invalid(format!("class {} has an empty item", c.name)));
                }
            }
            classes.push(LexicalClass { name: c.name, open: c.open, items });
        }

        let mut rules = Vec::new();
        let mut alt_counter: HashMap<u32, usize> = HashMap::new();
        for r in file.rules {
            let rhs = parse_rhs(&r.rhs);
            if rhs.is_empty() {
                return Err(invalid(format!("rule {}: empty rhs", r.id)));
            }
            if !(r.weight.is_finite() && r.weight > 0.0) {
                return Err(invalid(format!("rule {}: weight must be positive", r.id)));
            }
            if r.nl.is_empty() {
                return Err(invalid(format!("rule {}: no nl template", r.id)));
            }
            let slots = rhs.iter().filter(|s| matches!(s, Segment::Symbol(_))).count();
            let mut nl = Vec::new();
            for t in &r.nl {
                let parts = parse_nl(t).map_err(invalid)?;
                let used: BTreeSet<usize> = parts
                    .iter()
                    .flat_map(|p| match p {
                        NlPart::Slot(i) => vec![*i],
                        NlPart::Apply { pattern, arg } => vec![*pattern, *arg],
                        NlPart::Text(_) => vec![],
                    })
                    .collect();
                if used != (1..=slots).collect() {
                    return Err(invalid(format!(
                        "rule {}: template `{t}` must use slots 1..={slots} exactly",
                        r.id
                    )));
                }
                nl.push(parts);
            }
            let alt = alt_counter.entry(r.id).or_insert(0);
            rules.push(ProductionRule {
                id: r.id,
                alt: *alt,
                lhs: r.lhs,
                rhs,
                nl_templates: r.nl,
                weight: r.weight,
                nl,
            });
            *alt += 1;
        }

        let mut by_lhs: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in rules.iter().enumerate() {
            by_lhs.entry(r.lhs.clone()).or_default().push(i);
        }
        let class_index: HashMap<String, usize> =
            classes.iter().enumerate().map(|(i, c)| (c.name.clone(), i)).collect();

        let grammar = Grammar {
            name: file.name,
            start: file.start,
            max_depth: file.max_depth,
            rules,
            classes,
            aliases: file.aliases,
            groupable: file.groupable,
            by_lhs,
            class_index,
        };
        grammar.check()?;
        Ok(grammar)
    }

    fn check(&self) -> Result<(), GrammarError> {
        let invalid = |m: String| Err(GrammarError::Invalid(m));
        if !self.by_lhs.contains_key(&self.start) {
            return invalid(format!("no rule for start symbol <{}>", self.start));
        }
        for name in self.by_lhs.keys() {
            if self.class_index.contains_key(name) {
                return invalid(format!("<{name}> is both a rule lhs and a class"));
            }
        }
        for r in &self.rules {
            for sym in r.symbols() {
                if !self.by_lhs.contains_key(sym) && !self.class_index.contains_key(sym) {
                    return invalid(format!("rule {}: <{sym}> has no rule and is not a class", r.id));
                }
            }
        }
        for g in &self.groupable {
            if !self.by_lhs.contains_key(g) {
                return invalid(format!("groupable <{g}> is not a nonterminal"));
            }
        }
        let mut heads = HashSet::new();
        for c in self.classes.iter().filter(|c| c.open) {
            match &c.items {
                ClassItems::Pool(items) => {
                    for item in items {
                        if !heads.insert(item.head().to_string()) {
                            return invalid(format!("open construct `{}` is listed twice", item.head()));
                        }
                    }
                }
                ClassItems::Range { .. } => return invalid(format!("open class {} must be a pool", c.name)),
            }
        }
        for c in self.classes.iter().filter(|c| !c.open) {
            if let ClassItems::Pool(items) = &c.items {
                if let Some(i) = items.iter().find(|i| heads.contains(i.head())) {
                    return invalid(format!("`{}` is in both an open and a closed class", i.head()));
                }
            }
        }
        Ok(())
    }

    fn class(&self, name: &str) -> Option<&LexicalClass> {
        self.class_index.get(name).map(|&i| &self.classes[i])
    }

    /// Sets the sampling weight of every alternative with rule id `id`.
    pub fn set_weight(&mut self, id: u32, weight: f64) -> Result<(), GrammarError> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(GrammarError::Invalid(format!("rule {id}: weight must be positive")));
        }
        let mut found = false;
        for r in self.rules.iter_mut().filter(|r| r.id == id) {
            r.weight = weight;
            found = true;
        }
        if !found {
            return Err(GrammarError::Invalid(format!("no rule with id {id}")));
        }
        Ok(())
    }

    pub fn productions(&self, lhs: &str) -> impl Iterator<Item = &ProductionRule> {
        self.by_lhs.get(lhs).into_iter().flatten().map(|&i| &self.rules[i])
    }

    /// Every entry of every open class, as gold lexicon entries.
    pub fn ovc_pool(&self) -> Vec<LexiconEntry> {
        self.classes
            .iter()
            .filter(|c| c.open)
            .flat_map(|c| match &c.items {
                ClassItems::Pool(items) => items.clone(),
                ClassItems::Range { .. } => Vec::new(),
            })
            .map(|i| LexiconEntry::new(&i.nl, &i.value, Domain::Ltl, Source::Gold))
            .collect()
    }

    /// Heads of open-class constructs, the tokens that must be backed by a
    /// gold entry wherever they occur in a formal statement.
    pub fn open_heads(&self) -> HashSet<String> {
        self.ovc_pool()
            .iter()
            .map(|e| PoolItem { value: e.value.clone(), nl: String::new() }.head().to_string())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Expansion

/// One choice made while expanding: a production for a nonterminal or an item
/// for a lexical class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pick {
    Rule { id: u32, alt: usize },
    Item(String),
}

trait Chooser {
    fn production<'g>(&mut self, lhs: &str, alts: &[&'g ProductionRule]) -> Result<&'g ProductionRule, GrammarError>;
    fn item(&mut self, class: &LexicalClass) -> Result<PoolItem, GrammarError>;
    fn template(&mut self, count: usize) -> usize;
}

struct RandomChooser(ChaCha8Rng);

impl Chooser for RandomChooser {
    fn production<'g>(&mut self, _lhs: &str, alts: &[&'g ProductionRule]) -> Result<&'g ProductionRule, GrammarError> {
        alts.choose_weighted(&mut self.0, |r| r.weight)
            .copied()
            .map_err(|e| GrammarError::Invalid(e.to_string()))
    }

    fn item(&mut self, class: &LexicalClass) -> Result<PoolItem, GrammarError> {
        Ok(match &class.items {
            ClassItems::Pool(items) => items.choose(&mut self.0).expect("pool is nonempty").clone(),
            ClassItems::Range { min, max } => {
                let v = self.0.random_range(*min..=*max).to_string();
                PoolItem { value: v.clone(), nl: v }
            }
        })
    }

    fn template(&mut self, count: usize) -> usize {
        self.0.random_range(0..count)
    }
}

struct ScriptChooser<'a>(std::slice::Iter<'a, Pick>);

impl Chooser for ScriptChooser<'_> {
    fn production<'g>(&mut self, lhs: &str, alts: &[&'g ProductionRule]) -> Result<&'g ProductionRule, GrammarError> {
        match self.0.next() {
            Some(Pick::Rule { id, alt }) => alts
                .iter()
                .find(|r| r.id == *id && r.alt == *alt)
                .copied()
                .ok_or_else(|| GrammarError::Script(format!("rule {id}.{alt} does not expand <{lhs}>"))),
            other => Err(GrammarError::Script(format!("expected a rule for <{lhs}>, got {other:?}"))),
        }
    }

    fn item(&mut self, class: &LexicalClass) -> Result<PoolItem, GrammarError> {
        let Some(Pick::Item(value)) = self.0.next() else {
            return Err(GrammarError::Script(format!("expected an item for <{}>", class.name)));
        };
        let found = match &class.items {
            ClassItems::Pool(items) => items.iter().find(|i| &i.value == value || i.head() == value).cloned(),
            ClassItems::Range { .. } if class.accepts(value) => {
                Some(PoolItem { value: value.clone(), nl: value.clone() })
            }
            ClassItems::Range { .. } => None,
        };
        found.ok_or_else(|| GrammarError::Script(format!("`{value}` is not in class <{}>", class.name)))
    }

    fn template(&mut self, _count: usize) -> usize {
        0
    }
}

/// A generated (x, y, K) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub x: String,
    pub y: String,
    pub k_gold: Vec<LexiconEntry>,
    pub derivation: Vec<u32>,
    pub seed: u64,
    #[serde(default = "ltl")]
    pub domain: Domain,
}

fn ltl() -> Domain {
    Domain::Ltl
}

impl From<SyntheticInstance> for Instance {
    fn from(s: SyntheticInstance) -> Self {
        Instance { x: s.x, y: s.y, k_gold: s.k_gold, domain: s.domain }
    }
}

struct Expansion {
    formal: String,
    nl: String,
}

struct Walk<'g, C> {
    grammar: &'g Grammar,
    chooser: C,
    derivation: Vec<u32>,
    k_gold: Vec<LexiconEntry>,
}

fn replace_placeholder(pattern: &str, arg: &str) -> String {
    pattern
        .split(' ')
        .map(|w| if w == ARG_PLACEHOLDER { arg } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

impl<C: Chooser> Walk<'_, C> {
    fn expand(&mut self, symbol: &str, depth: usize) -> Result<Expansion, GrammarError> {
        let grammar = self.grammar;
        if let Some(class) = grammar.class(symbol) {
            let item = self.chooser.item(class)?;
            if class.open && !self.k_gold.iter().any(|e| e.value == item.value) {
                self.k_gold.push(LexiconEntry::new(&item.nl, &item.value, Domain::Ltl, Source::Gold));
            }
            return Ok(Expansion { formal: item.head().to_string(), nl: item.nl });
        }
        if depth > grammar.max_depth {
            return Err(GrammarError::MaxDepth {
                nonterminal: symbol.to_string(),
                max_depth: grammar.max_depth,
            });
        }
        let alts: Vec<&ProductionRule> = grammar.productions(symbol).collect();
        let rule = self.chooser.production(symbol, &alts)?;
        self.derivation.push(rule.id);

        let mut formal = String::new();
        let mut children = Vec::new();
        for seg in &rule.rhs {
            match seg {
                Segment::Literal(text) => formal.push_str(text),
                Segment::Symbol(name) => {
                    let child = self.expand(name, depth + 1)?;
                    formal.push_str(&child.formal);
                    children.push(child.nl);
                }
            }
        }
        let template = &rule.nl[self.chooser.template(rule.nl.len())];
        let nl = template
            .iter()
            .map(|p| match p {
                NlPart::Text(t) => t.clone(),
                NlPart::Slot(i) => children[i - 1].clone(),
                NlPart::Apply { pattern, arg } => replace_placeholder(&children[pattern - 1], &children[arg - 1]),
            })
            .collect();
        Ok(Expansion { formal, nl })
    }
}

fn finish_sentence(nl: &str) -> String {
    let text = crate::lexicon::normalize_text(nl);
    let mut chars = text.chars();
    let mut out: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    if !out.ends_with(['.', '?', '!']) {
        out.push('.');
    }
    out
}

fn run<C: Chooser>(grammar: &Grammar, chooser: C, seed: u64) -> Result<SyntheticInstance, GrammarError> {
    let mut walk = Walk { grammar, chooser, derivation: Vec::new(), k_gold: Vec::new() };
    let out = walk.expand(&grammar.start, 1)?;
    Ok(SyntheticInstance {
        x: finish_sentence(&out.nl),
        y: out.formal,
        k_gold: walk.k_gold,
        derivation: walk.derivation,
        seed,
        domain: Domain::Ltl,
    })
}

/// Expands the start symbol with choices drawn from a ChaCha8 stream seeded
/// by `seed`. Pure in `(grammar, seed)`.
pub fn expand(grammar: &Grammar, seed: u64) -> Result<SyntheticInstance, GrammarError> {
    run(grammar, RandomChooser(ChaCha8Rng::seed_from_u64(seed)), seed)
}

/// Expands with an explicit sequence of choices (preorder). Always uses the
/// first NL template of each rule.
pub fn expand_scripted(grammar: &Grammar, picks: &[Pick]) -> Result<SyntheticInstance, GrammarError> {
    let mut chooser = ScriptChooser(picks.iter());
    let inst = run(grammar, &mut chooser, 0)?;
    match chooser.0.len() {
        0 => Ok(inst),
        left => Err(GrammarError::Script(format!("{left} unused picks"))),
    }
}

impl<C: Chooser> Chooser for &mut C {
    fn production<'g>(&mut self, lhs: &str, alts: &[&'g ProductionRule]) -> Result<&'g ProductionRule, GrammarError> {
        (**self).production(lhs, alts)
    }
    fn item(&mut self, class: &LexicalClass) -> Result<PoolItem, GrammarError> {
        (**self).item(class)
    }
    fn template(&mut self, count: usize) -> usize {
        (**self).template(count)
    }
}

/// Generates `n` instances with per-instance seeds `seed + index`. Each gold
/// set gets `distractor_count` extra entries drawn without replacement from
/// the open-class pool, excluding the instance's genuine constructs.
pub fn generate_dataset(
    grammar: &Grammar,
    n: usize,
    seed: u64,
    distractor_count: usize,
) -> Result<Vec<SyntheticInstance>, GrammarError> {
    if n == 0 {
        return Err(GrammarError::EmptyDataset);
    }
    let pool = grammar.ovc_pool();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let instance_seed = seed.wrapping_add(i as u64);
            let mut inst = expand(grammar, instance_seed)?;
            if distractor_count > 0 {
                add_distractors(&mut inst, &pool, distractor_count)?;
            }
            Ok(inst)
        })
        .collect()
}

fn add_distractors(
    inst: &mut SyntheticInstance,
    pool: &[LexiconEntry],
    count: usize,
) -> Result<(), GrammarError> {
    let genuine: HashSet<&str> = inst.k_gold.iter().map(|e| e.value.as_str()).collect();
    let candidates: Vec<&LexiconEntry> = pool.iter().filter(|e| !genuine.contains(e.value.as_str())).collect();
    if count > candidates.len() {
        return Err(GrammarError::DistractorPool { requested: count, available: candidates.len() });
    }
    // Separate stream from the expansion so distractors never perturb x/y.
    let mut rng = ChaCha8Rng::seed_from_u64(inst.seed ^ 0x9e37_79b9_7f4a_7c15);
    let drawn: Vec<LexiconEntry> = candidates
        .choose_multiple(&mut rng, count)
        .map(|e| LexiconEntry { source: Source::Distractor, ..(*e).clone() })
        .collect();
    inst.k_gold.extend(drawn);
    inst.k_gold.shuffle(&mut rng);
    Ok(())
}

// ---------------------------------------------------------------------------
// Validation

const MULTI_CHAR_OPS: &[&str] = &["<->", "!=", ">=", "<=", "=>", "->", "&&", "||", "=="];

/// Splits formal text into tokens with their byte offsets: identifier/number
/// runs, known multi-character ASCII operators, then single characters.
pub fn formal_tokens(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().unwrap();
        if c.is_whitespace() {
            i += c.len_utf8();
        } else if c.is_alphanumeric() || c == '_' {
            let end = rest.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(rest.len());
            out.push((i, rest[..end].to_string()));
            i += end;
        } else if let Some(op) = MULTI_CHAR_OPS.iter().find(|op| rest.starts_with(**op)) {
            out.push((i, op.to_string()));
            i += op.len();
        } else {
            out.push((i, c.to_string()));
            i += c.len_utf8();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rejection {
    pub token_index: usize,
    /// Character (not byte) offset into the input; the input length when the
    /// statement ended early.
    pub position: usize,
    pub token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Validation {
    pub accepted: bool,
    /// Rule ids in preorder for one derivation, when accepted.
    pub derivation: Option<Vec<u32>>,
    pub rejection: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Sym {
    T(String),
    N(usize),
    C(usize),
}

struct EProd {
    lhs: usize,
    rhs: Vec<Sym>,
    rule_id: Option<u32>,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    prod: usize,
    dot: usize,
    origin: usize,
}

struct Recognizer<'g> {
    grammar: &'g Grammar,
    prods: Vec<EProd>,
    by_lhs: Vec<Vec<usize>>,
    start: usize,
}

impl<'g> Recognizer<'g> {
    fn new(grammar: &'g Grammar) -> Self {
        let mut names: Vec<&str> = grammar.by_lhs.keys().map(String::as_str).collect();
        names.sort_unstable();
        let nt: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let alias = |t: String| grammar.aliases.get(&t).cloned().unwrap_or(t);

        let mut prods = Vec::new();
        for r in &grammar.rules {
            let mut rhs = Vec::new();
            for seg in &r.rhs {
                match seg {
                    Segment::Literal(text) => {
                        rhs.extend(formal_tokens(text).into_iter().map(|(_, t)| Sym::T(alias(t))))
                    }
                    Segment::Symbol(s) => rhs.push(match nt.get(s.as_str()) {
                        Some(&i) => Sym::N(i),
                        None => Sym::C(grammar.class_index[s]),
                    }),
                }
            }
            prods.push(EProd { lhs: nt[r.lhs.as_str()], rhs, rule_id: Some(r.id) });
        }
        for g in &grammar.groupable {
            let i = nt[g.as_str()];
            prods.push(EProd {
                lhs: i,
                rhs: vec![Sym::T("(".into()), Sym::N(i), Sym::T(")".into())],
                rule_id: None,
            });
        }
        let mut by_lhs = vec![Vec::new(); names.len()];
        for (i, p) in prods.iter().enumerate() {
            by_lhs[p.lhs].push(i);
        }
        let start = nt[grammar.start.as_str()];
        Self { grammar, prods, by_lhs, start }
    }

    fn matches(&self, sym: &Sym, token: &str) -> bool {
        match sym {
            Sym::T(t) => t == token,
            Sym::C(c) => self.grammar.classes[*c].accepts(token),
            Sym::N(_) => false,
        }
    }

    fn recognize(&self, tokens: &[String]) -> Result<Vec<Vec<Item>>, usize> {
        let n = tokens.len();
        let mut chart: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
        let mut seen: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
        let push = |chart: &mut Vec<Vec<Item>>, seen: &mut Vec<HashSet<Item>>, k: usize, it: Item| {
            if seen[k].insert(it) {
                chart[k].push(it);
            }
        };
        for &p in &self.by_lhs[self.start] {
            push(&mut chart, &mut seen, 0, Item { prod: p, dot: 0, origin: 0 });
        }
        for k in 0..=n {
            let mut idx = 0;
            while idx < chart[k].len() {
                let it = chart[k][idx];
                idx += 1;
                let prod = &self.prods[it.prod];
                match prod.rhs.get(it.dot) {
                    Some(Sym::N(b)) => {
                        for &p in &self.by_lhs[*b] {
                            push(&mut chart, &mut seen, k, Item { prod: p, dot: 0, origin: k });
                        }
                        // No empty productions, so completion of b at k is impossible.
                    }
                    Some(sym) => {
                        if k < n && self.matches(sym, &tokens[k]) {
                            push(&mut chart, &mut seen, k + 1, Item { dot: it.dot + 1, ..it });
                        }
                    }
                    None => {
                        let waiting: Vec<Item> = chart[it.origin]
                            .iter()
                            .filter(|w| self.prods[w.prod].rhs.get(w.dot) == Some(&Sym::N(prod.lhs)))
                            .copied()
                            .collect();
                        for w in waiting {
                            push(&mut chart, &mut seen, k, Item { dot: w.dot + 1, ..w });
                        }
                    }
                }
            }
            if k < n && chart[k + 1].is_empty() {
                return Err(k);
            }
        }
        Ok(chart)
    }

    fn derive(&self, tokens: &[String], chart: &[Vec<Item>]) -> Option<Vec<u32>> {
        // completed[end] -> (prod, origin)
        let completed: Vec<Vec<(usize, usize)>> = chart
            .iter()
            .map(|set| {
                set.iter()
                    .filter(|it| it.dot == self.prods[it.prod].rhs.len())
                    .map(|it| (it.prod, it.origin))
                    .collect()
            })
            .collect();
        let mut memo = HashMap::new();
        let mut builder = TreeBuilder { rec: self, tokens, completed: &completed, memo: &mut memo };
        builder.tree(self.start, 0, tokens.len())
    }
}

struct TreeBuilder<'a, 'g> {
    rec: &'a Recognizer<'g>,
    tokens: &'a [String],
    completed: &'a [Vec<(usize, usize)>],
    memo: &'a mut HashMap<(usize, usize, usize), Option<Vec<u32>>>,
}

impl TreeBuilder<'_, '_> {
    fn tree(&mut self, nt: usize, start: usize, end: usize) -> Option<Vec<u32>> {
        if let Some(hit) = self.memo.get(&(nt, start, end)) {
            return hit.clone();
        }
        // Guard against unit cycles while this span is in progress.
        self.memo.insert((nt, start, end), None);
        let candidates: Vec<usize> = self.completed[end]
            .iter()
            .filter(|(p, origin)| *origin == start && self.rec.prods[*p].lhs == nt)
            .map(|(p, _)| *p)
            .collect();
        let mut result = None;
        for p in candidates {
            if let Some(children) = self.seq(p, 0, start, end) {
                let mut d = Vec::new();
                d.extend(self.rec.prods[p].rule_id);
                d.extend(children);
                result = Some(d);
                break;
            }
        }
        self.memo.insert((nt, start, end), result.clone());
        result
    }

    fn seq(&mut self, prod: usize, k: usize, pos: usize, end: usize) -> Option<Vec<u32>> {
        let rhs = &self.rec.prods[prod].rhs;
        if k == rhs.len() {
            return (pos == end).then(Vec::new);
        }
        if pos >= end {
            return None;
        }
        match &rhs[k] {
            Sym::N(b) => {
                let b = *b;
                let ends: Vec<usize> = (pos + 1..=end)
                    .filter(|&mid| {
                        self.completed[mid]
                            .iter()
                            .any(|(p, o)| *o == pos && self.rec.prods[*p].lhs == b)
                    })
                    .collect();
                for mid in ends {
                    if let Some(mut head) = self.tree(b, pos, mid) {
                        if let Some(tail) = self.seq(prod, k + 1, mid, end) {
                            head.extend(tail);
                            return Some(head);
                        }
                    }
                }
                None
            }
            sym => {
                if self.rec.matches(sym, &self.tokens[pos]) {
                    self.seq(prod, k + 1, pos + 1, end)
                } else {
                    None
                }
            }
        }
    }
}

impl Grammar {
    /// Accepts exactly the token strings derivable from the start symbol,
    /// after alias normalization and optional grouping parentheses.
    pub fn validate(&self, y: &str) -> Validation {
        let toks = formal_tokens(y);
        let tokens: Vec<String> = toks
            .iter()
            .map(|(_, t)| self.aliases.get(t).cloned().unwrap_or_else(|| t.clone()))
            .collect();
        let char_pos = |byte: usize| y[..byte].chars().count();
        let rec = Recognizer::new(self);
        let reject = |k: usize| Validation {
            accepted: false,
            derivation: None,
            rejection: Some(Rejection {
                token_index: k,
                position: toks.get(k).map_or_else(|| y.chars().count(), |(b, _)| char_pos(*b)),
                token: toks.get(k).map(|(_, t)| t.clone()),
            }),
        };
        match rec.recognize(&tokens) {
            Err(k) => reject(k),
            Ok(chart) => match rec.derive(&tokens, &chart) {
                Some(d) => Validation { accepted: true, derivation: Some(d), rejection: None },
                None => reject(tokens.len()),
            },
        }
    }
}

pub fn validate(y: &str, grammar: &Grammar) -> Validation {
    grammar.validate(y)
}
