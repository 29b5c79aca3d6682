//! Synthetic desk-scale tasks.
//!
//! * A local-pattern task: a sequence is positive iff a designated bigram
//!   occurs adjacently somewhere in it.
//! * A heuristic probe in the style of HANS: premise/hypothesis pairs over a
//!   small abstract grammar, where a model that learned "every hypothesis
//!   word appears in the premise ⇒ entailment" scores perfectly on the
//!   heuristic-entailed cells and fails the heuristic-nonentailed ones.
//!
//! The probe's training split is biased: every example agrees with the
//! lexical-overlap heuristic (full overlap is always entailment, and every
//! non-entailment has a hypothesis word missing from the premise). The
//! diagnostic split covers all six (heuristic × subset) cells.
//!
//! Everything is a pure function of the seed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Entailment,
    NonEntailment,
}

impl Label {
    /// Class index used by the classifier.
    pub fn class(self) -> usize {
        match self {
            Self::Entailment => 0,
            Self::NonEntailment => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 0 {
            Self::Entailment
        } else {
            Self::NonEntailment
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Entailment => "entailment",
            Self::NonEntailment => "non_entailment",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    /// Accepts both `non_entailment` and the HANS spelling `non-entailment`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(Self::Entailment),
            "non_entailment" | "non-entailment" => Ok(Self::NonEntailment),
            other => Err(Error::Format(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    LexicalOverlap,
    Subsequence,
    Constituent,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Self::LexicalOverlap, Self::Subsequence, Self::Constituent];
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LexicalOverlap => "lexical_overlap",
            Self::Subsequence => "subsequence",
            Self::Constituent => "constituent",
        })
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.to_string() == s)
            .ok_or_else(|| Error::Format(format!("unknown heuristic {s:?}")))
    }
}

/// Whether the heuristic's prediction (always "entailment") is right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    HeuristicEntailed,
    HeuristicNonentailed,
}

impl Subset {
    pub const ALL: [Subset; 2] = [Self::HeuristicEntailed, Self::HeuristicNonentailed];

    pub fn for_label(label: Label) -> Self {
        match label {
            Label::Entailment => Self::HeuristicEntailed,
            Label::NonEntailment => Self::HeuristicNonentailed,
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HeuristicEntailed => "heuristic_entailed",
            Self::HeuristicNonentailed => "heuristic_nonentailed",
        })
    }
}

impl FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.to_string() == s)
            .ok_or_else(|| Error::Format(format!("unknown subset {s:?}")))
    }
}

/// A premise/hypothesis pair. Training pairs carry no heuristic tag.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiagnosticCase {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: Label,
    pub tag: Option<(Heuristic, Subset)>,
}

impl DiagnosticCase {
    /// `[CLS] premise [SEP] hypothesis`.
    pub fn to_example(&self) -> Example {
        let mut tokens = Vec::with_capacity(self.premise.len() + self.hypothesis.len() + 2);
        tokens.push(ToyGrammar::CLS);
        tokens.extend(&self.premise);
        tokens.push(ToyGrammar::SEP);
        tokens.extend(&self.hypothesis);
        Example {
            tokens,
            label: self.label.class(),
            tag: self.tag,
        }
    }

    pub fn heuristic(&self) -> Option<Heuristic> {
        self.tag.map(|t| t.0)
    }

    pub fn subset(&self) -> Option<Subset> {
        self.tag.map(|t| t.1)
    }

    /// Every hypothesis token occurs in the premise.
    pub fn full_overlap(&self) -> bool {
        let premise: HashSet<_> = self.premise.iter().collect();
        self.hypothesis.iter().all(|t| premise.contains(t))
    }

    /// The hypothesis occurs contiguously in the premise.
    pub fn is_contiguous_subsequence(&self) -> bool {
        let h = &self.hypothesis;
        !h.is_empty() && self.premise.windows(h.len()).any(|w| w == h.as_slice())
    }
}

/// One classifier input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub tag: Option<(Heuristic, Subset)>,
}

/// The probe's abstract vocabulary, split into disjoint role classes.
///
/// | ids     | role               |
/// |---------|--------------------|
/// | 0, 1    | `[CLS]`, `[SEP]`   |
/// | 2–7     | `if` `,` `and` `near` `by` `not` |
/// | 8–11    | adverbs            |
/// | 12–16   | nouns (agents/patients) |
/// | 17–20   | transitive verbs   |
/// | 21–24   | intransitive verbs |
/// | 25–63   | unused by the templates |
///
/// The content classes are small on purpose: every word then appears in
/// every role often enough for a toy model to learn order-sensitive rules
/// from a couple of thousand pairs.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyGrammar;

impl ToyGrammar {
    pub const CLS: usize = 0;
    pub const SEP: usize = 1;
    pub const IF: usize = 2;
    pub const COMMA: usize = 3;
    pub const AND: usize = 4;
    pub const NEAR: usize = 5;
    pub const BY: usize = 6;
    pub const NOT: usize = 7;
    pub const ADVERBS: std::ops::Range<usize> = 8..12;
    pub const NOUNS: std::ops::Range<usize> = 12..17;
    pub const TRANSITIVE: std::ops::Range<usize> = 17..21;
    pub const INTRANSITIVE: std::ops::Range<usize> = 21..25;
    pub const VOCAB_SIZE: usize = 64;

    /// Longest `[CLS] premise [SEP] hypothesis` the templates produce.
    pub const MAX_PAIR_LEN: usize = 12;

    /// Human-readable token, for debugging and docs.
    pub fn word(id: usize) -> String {
        match id {
            Self::CLS => "[CLS]".into(),
            Self::SEP => "[SEP]".into(),
            Self::IF => "if".into(),
            Self::COMMA => ",".into(),
            Self::AND => "and".into(),
            Self::NEAR => "near".into(),
            Self::BY => "by".into(),
            Self::NOT => "not".into(),
            i if Self::ADVERBS.contains(&i) => format!("adv{}", i - Self::ADVERBS.start),
            i if Self::NOUNS.contains(&i) => format!("n{}", i - Self::NOUNS.start),
            i if Self::TRANSITIVE.contains(&i) => format!("vt{}", i - Self::TRANSITIVE.start),
            i if Self::INTRANSITIVE.contains(&i) => format!("vi{}", i - Self::INTRANSITIVE.start),
            i => format!("<{i}>"),
        }
    }
}

struct Draw<'a> {
    rng: &'a mut SeededRng,
}

impl Draw<'_> {
    fn from(&mut self, range: std::ops::Range<usize>) -> usize {
        self.rng.random_range(range)
    }

    /// `count` distinct nouns.
    fn nouns(&mut self, count: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = ToyGrammar::NOUNS.collect();
        pool.shuffle(self.rng);
        pool.truncate(count);
        pool
    }

    fn two_intransitive(&mut self) -> (usize, usize) {
        let v = self.from(ToyGrammar::INTRANSITIVE);
        let w = loop {
            let w = self.from(ToyGrammar::INTRANSITIVE);
            if w != v {
                break w;
            }
        };
        (v, w)
    }
}

/// Diagnostic case for one (heuristic, subset) cell.
fn diagnostic_case(heuristic: Heuristic, subset: Subset, rng: &mut SeededRng) -> DiagnosticCase {
    use ToyGrammar as G;
    let variant = rng.random_range(0..2);
    let mut d = Draw { rng };
    let n = d.nouns(3);
    let (a, b, c) = (n[0], n[1], n[2]);
    let r = d.from(G::TRANSITIVE);
    let (v, w) = d.two_intransitive();
    let (premise, hypothesis) = match (heuristic, subset, variant) {
        // Passive: "b r by a" means a r b.
        (Heuristic::LexicalOverlap, Subset::HeuristicEntailed, 0) => (vec![b, r, G::BY, a], vec![a, r, b]),
        (Heuristic::LexicalOverlap, Subset::HeuristicEntailed, _) => (vec![a, G::NEAR, c, r, b], vec![a, r, b]),
        (Heuristic::LexicalOverlap, Subset::HeuristicNonentailed, 0) => (vec![a, r, b], vec![b, r, a]),
        (Heuristic::LexicalOverlap, Subset::HeuristicNonentailed, _) => (vec![b, r, G::BY, a], vec![b, r, a]),
        (Heuristic::Subsequence, Subset::HeuristicEntailed, 0) => {
            (vec![d.from(G::ADVERBS), a, r, b], vec![a, r, b])
        }
        (Heuristic::Subsequence, Subset::HeuristicEntailed, _) => (vec![a, v, G::NEAR, b], vec![a, v]),
        (Heuristic::Subsequence, Subset::HeuristicNonentailed, 0) => (vec![a, G::NEAR, b, v], vec![b, v]),
        (Heuristic::Subsequence, Subset::HeuristicNonentailed, _) => (vec![a, G::NEAR, b, r, c], vec![b, r, c]),
        (Heuristic::Constituent, Subset::HeuristicEntailed, 0) => (vec![a, v, G::AND, b, w], vec![a, v]),
        (Heuristic::Constituent, Subset::HeuristicEntailed, _) => (vec![a, v, G::AND, b, w], vec![b, w]),
        (Heuristic::Constituent, Subset::HeuristicNonentailed, 0) => {
            (vec![G::IF, a, v, G::COMMA, b, w], vec![a, v])
        }
        (Heuristic::Constituent, Subset::HeuristicNonentailed, _) => {
            (vec![G::IF, a, r, c, G::COMMA, b, w], vec![a, r, c])
        }
    };
    let label = match subset {
        Subset::HeuristicEntailed => Label::Entailment,
        Subset::HeuristicNonentailed => Label::NonEntailment,
    };
    DiagnosticCase {
        premise,
        hypothesis,
        label,
        tag: Some((heuristic, subset)),
    }
}

/// A training pair that agrees with the lexical-overlap heuristic.
///
/// Entailed pairs reuse the heuristic-entailed templates plus identity
/// pairs. Non-entailed pairs take such a pair and, with equal probability,
/// replace every hypothesis word by one absent from the premise or negate
/// the hypothesis with `not` before its last word.
fn biased_training_case(label: Label, rng: &mut SeededRng) -> DiagnosticCase {
    use ToyGrammar as G;
    let mut case = match rng.random_range(0..4) {
        3 => {
            let mut d = Draw { rng };
            let n = d.nouns(2);
            let r = d.from(G::TRANSITIVE);
            let v = d.from(G::INTRANSITIVE);
            let sentence = if d.rng.random_bool(0.5) { vec![n[0], r, n[1]] } else { vec![n[0], v] };
            DiagnosticCase {
                premise: sentence.clone(),
                hypothesis: sentence,
                label: Label::Entailment,
                tag: None,
            }
        }
        h => diagnostic_case(Heuristic::ALL[h], Subset::HeuristicEntailed, rng),
    };
    case.tag = None;
    if label == Label::NonEntailment {
        case.label = Label::NonEntailment;
        let premise = case.premise.clone();
        let h = &mut case.hypothesis;
        let fresh = |rng: &mut SeededRng, old: usize| {
            let class = [G::NOUNS, G::TRANSITIVE, G::INTRANSITIVE]
                .into_iter()
                .find(|c| c.contains(&old))
                .expect("hypotheses hold content words only");
            loop {
                let x = rng.random_range(class.clone());
                if !premise.contains(&x) {
                    break x;
                }
            }
        };
        if rng.random_range(0..2) == 0 {
            for slot in 0..h.len() {
                h[slot] = fresh(rng, h[slot]);
            }
        } else {
            h.insert(h.len() - 1, G::NOT);
        }
    }
    case
}

#[derive(Clone, Debug, PartialEq)]
pub struct HansStyleCorpus {
    /// Balanced, heuristic-consistent training pairs.
    pub train: Vec<DiagnosticCase>,
    /// `per_case_count` cases for each of the six cells, in cell order.
    pub diagnostic: Vec<DiagnosticCase>,
}

/// Training pairs generated per diagnostic case by [`gen_hans_style`].
pub const DEFAULT_TRAIN_PER_CASE: usize = 2;

/// The probe with `per_case_count` diagnostic cases per cell and
/// `12 * per_case_count` training pairs.
pub fn gen_hans_style(seed: u64, per_case_count: usize) -> Result<HansStyleCorpus> {
    gen_hans_style_sized(seed, per_case_count, 6 * DEFAULT_TRAIN_PER_CASE * per_case_count)
}

/// The probe with `per_case_count` diagnostic cases per cell and
/// `train_size` training pairs (half of each label, shuffled).
pub fn gen_hans_style_sized(seed: u64, per_case_count: usize, train_size: usize) -> Result<HansStyleCorpus> {
    if per_case_count == 0 || train_size == 0 {
        return Err(Error::config("per_case_count and train_size must be positive"));
    }
    let mut rng = seeded(seed);
    let mut diagnostic = Vec::with_capacity(6 * per_case_count);
    for heuristic in Heuristic::ALL {
        for subset in Subset::ALL {
            for _ in 0..per_case_count {
                diagnostic.push(diagnostic_case(heuristic, subset, &mut rng));
            }
        }
    }
    let mut train = biased_split(train_size, &mut rng);
    train.shuffle(&mut rng);
    Ok(HansStyleCorpus { train, diagnostic })
}

/// `size` heuristic-consistent pairs from the training distribution, half
/// of each label, shuffled. Held-out dev data for the probe.
pub fn gen_biased_split(seed: u64, size: usize) -> Result<Vec<DiagnosticCase>> {
    if size == 0 {
        return Err(Error::config("size must be positive"));
    }
    let mut rng = seeded(seed);
    let mut split = biased_split(size, &mut rng);
    split.shuffle(&mut rng);
    Ok(split)
}

fn biased_split(size: usize, rng: &mut SeededRng) -> Vec<DiagnosticCase> {
    (0..size)
        .map(|i| {
            let label = if i < size / 2 {
                Label::Entailment
            } else {
                Label::NonEntailment
            };
            biased_training_case(label, rng)
        })
        .collect()
}

/// Checks the structural invariant of a tagged case.
pub fn satisfies_heuristic(case: &DiagnosticCase) -> bool {
    match case.heuristic() {
        None => true,
        Some(Heuristic::LexicalOverlap) => case.full_overlap(),
        Some(Heuristic::Subsequence) => case.is_contiguous_subsequence(),
        Some(Heuristic::Constituent) => is_clause_of(&case.premise, &case.hypothesis),
    }
}

/// Whether `hypothesis` is one of the clauses the grammar joins with
/// `and`, or the antecedent of an `if … ,` premise.
fn is_clause_of(premise: &[usize], hypothesis: &[usize]) -> bool {
    use ToyGrammar as G;
    let body = match premise.first() {
        Some(&G::IF) => &premise[1..],
        _ => premise,
    };
    body.split(|&t| t == G::AND || t == G::COMMA)
        .any(|clause| clause == hypothesis)
}

/// A heuristic-consistent training pair: full overlap exactly when entailed.
pub fn agrees_with_overlap(case: &DiagnosticCase) -> bool {
    case.full_overlap() == (case.label == Label::Entailment)
}

/// Designated adjacent pair for the local-pattern task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalTaskSpec {
    /// Sequence length including the leading `[CLS]`.
    pub len: usize,
    /// Symbols are drawn from `2..2 + alphabet`.
    pub alphabet: usize,
    pub bigram: (usize, usize),
}

impl Default for LocalTaskSpec {
    fn default() -> Self {
        Self {
            len: 10,
            alphabet: 12,
            bigram: (2, 3),
        }
    }
}

impl LocalTaskSpec {
    pub fn contains_bigram(&self, tokens: &[usize]) -> bool {
        tokens.windows(2).any(|w| (w[0], w[1]) == self.bigram)
    }

    fn validate(&self) -> Result<()> {
        let range = 2..2 + self.alphabet;
        if self.len < 4 || self.alphabet < 3 || !range.contains(&self.bigram.0) || !range.contains(&self.bigram.1) {
            return Err(Error::config(format!("unusable local task {self:?}")));
        }
        Ok(())
    }
}

fn random_symbols(spec: &LocalTaskSpec, rng: &mut SeededRng) -> Vec<usize> {
    let mut tokens = vec![ToyGrammar::CLS];
    tokens.extend((1..spec.len).map(|_| rng.random_range(2..2 + spec.alphabet)));
    tokens
}

/// [`gen_local_pattern_task_with`] under the default [`LocalTaskSpec`].
pub fn gen_local_pattern_task(seed: u64, size: usize) -> Result<Vec<Example>> {
    gen_local_pattern_task_with(seed, size, &LocalTaskSpec::default())
}

/// `size` sequences, `size / 2` of them positive, shuffled. Half of the
/// negatives contain both bigram symbols, never adjacent.
pub fn gen_local_pattern_task_with(seed: u64, size: usize, spec: &LocalTaskSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    if size == 0 {
        return Err(Error::config("size must be positive"));
    }
    let mut rng = seeded(seed);
    let positives = size / 2;
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let label = usize::from(i < positives);
        let tokens = if label == 1 {
            let mut t = random_symbols(spec, &mut rng);
            let at = rng.random_range(1..spec.len - 1);
            t[at] = spec.bigram.0;
            t[at + 1] = spec.bigram.1;
            t
        } else {
            let hard = i % 2 == 0;
            loop {
                let mut t = random_symbols(spec, &mut rng);
                if hard {
                    let first = rng.random_range(1..spec.len);
                    let second = rng.random_range(1..spec.len);
                    if first == second {
                        continue;
                    }
                    t[first] = spec.bigram.0;
                    t[second] = spec.bigram.1;
                }
                if !spec.contains_bigram(&t) {
                    break t;
                }
            }
        };
        out.push(Example { tokens, label, tag: None });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_ids(field: &str, line: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| Error::Row {
                line,
                message: format!("bad token id {t:?}"),
            })
        })
        .collect()
}

/// `label<TAB>heuristic<TAB>subset<TAB>premise ids<TAB>hypothesis ids`, one
/// case per line. Untagged cases write `-` in the heuristic and subset
/// columns.
pub fn write_cases<W: Write + ?Sized>(w: &mut W, cases: &[DiagnosticCase]) -> Result<()> {
    for c in cases {
        let (h, s) = match c.tag {
            Some((h, s)) => (h.to_string(), s.to_string()),
            None => ("-".into(), "-".into()),
        };
        writeln!(w, "{}\t{h}\t{s}\t{}\t{}", c.label, join_ids(&c.premise), join_ids(&c.hypothesis))?;
    }
    Ok(())
}

pub fn read_cases(path: &Path) -> Result<Vec<DiagnosticCase>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Row {
                line: lineno,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let row_err = |e: Error| Error::Row {
            line: lineno,
            message: e.to_string(),
        };
        let label = fields[0].parse().map_err(row_err)?;
        let tag = match (fields[1], fields[2]) {
            ("-", "-") => None,
            (h, s) => Some((h.parse().map_err(row_err)?, s.parse().map_err(row_err)?)),
        };
        out.push(DiagnosticCase {
            label,
            tag,
            premise: parse_ids(fields[3], lineno)?,
            hypothesis: parse_ids(fields[4], lineno)?,
        });
    }
    Ok(out)
}

/// `label<TAB>token ids` for the local-pattern task.
pub fn write_sequences<W: Write + ?Sized>(w: &mut W, examples: &[Example]) -> Result<()> {
    for e in examples {
        writeln!(w, "{}\t{}", e.label, join_ids(&e.tokens))?;
    }
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<Vec<Example>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (label, ids) = line.split_once('\t').ok_or_else(|| Error::Row {
            line: i + 1,
            message: "expected label<TAB>ids".into(),
        })?;
        let label = label.parse().map_err(|_| Error::Row {
            line: i + 1,
            message: format!("bad label {label:?}"),
        })?;
        out.push(Example {
            tokens: parse_ids(ids, i + 1)?,
            label,
            tag: None,
        });
    }
    Ok(out)
}

/// Reads either corpus format, telling them apart by column count.
pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path)?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    match first.map(|l| l.split('\t').count()) {
        Some(5) => Ok(read_cases(path)?.iter().map(DiagnosticCase::to_example).collect()),
        Some(2) => read_sequences(path),
        Some(n) => Err(Error::Format(format!("{}: unrecognised corpus with {n} columns", path.display()))),
        None => Err(Error::Format(format!("{}: empty corpus", path.display()))),
    }
}

/// Word-level tokenizer for real HANS text: lowercase, split on anything
/// that is not alphanumeric, and hash each word into `first_id..vocab_size`
/// with 64-bit FNV-1a. Collisions are possible and accepted.
#[derive(Clone, Copy, Debug)]
pub struct HashTokenizer {
    pub first_id: usize,
    pub vocab_size: usize,
}

impl HashTokenizer {
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let span = (self.vocab_size - self.first_id) as u64;
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| self.first_id + (fnv1a(w.as_bytes()) % span) as usize)
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Parses a HANS-format TSV (header row with at least `gold_label`,
/// `heuristic`, `sentence1`, `sentence2`). Fails without partial output on
/// any error.
pub fn load_hans_tsv(path: &Path, tokenizer: &HashTokenizer) -> Result<Vec<DiagnosticCase>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let find = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Format(format!("missing column {name:?}")))
    };
    let (label_col, heuristic_col, s1_col, s2_col) =
        (find("gold_label")?, find("heuristic")?, find("sentence1")?, find("sentence2")?);

    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |col: usize| {
            fields.get(col).copied().ok_or_else(|| Error::Row {
                line: lineno,
                message: format!("row has {} fields, expected column {}", fields.len(), columns[col]),
            })
        };
        let label: Label = field(label_col)?.trim().parse().map_err(|e: Error| Error::Row {
            line: lineno,
            message: e.to_string(),
        })?;
        let heuristic: Heuristic = field(heuristic_col)?.trim().parse().map_err(|e: Error| Error::Row {
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(DiagnosticCase {
            premise: tokenizer.tokenize(field(s1_col)?),
            hypothesis: tokenizer.tokenize(field(s2_col)?),
            label,
            tag: Some((heuristic, Subset::for_label(label))),
        });
    }
    Ok(out)
}

/// Accuracy for one (heuristic, subset) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub heuristic: Heuristic,
    pub subset: Subset,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// The six cells, heuristic-major in `Heuristic::ALL × Subset::ALL` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicTable {
    pub cells: Vec<CellScore>,
}

impl HeuristicTable {
    pub fn get(&self, heuristic: Heuristic, subset: Subset) -> &CellScore {
        self.cells
            .iter()
            .find(|c| c.heuristic == heuristic && c.subset == subset)
            .expect("table holds all six cells")
    }

    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "heuristic,subset,correct,total,accuracy")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.heuristic,
                c.subset,
                c.correct,
                c.total,
                crate::se_fusion::format_sig17(c.accuracy)
            )?;
        }
        Ok(())
    }
}

/// Accuracy per (heuristic, subset) cell. Untagged cases are ignored; empty
/// cells score 0 with `total = 0`.
pub fn score_by_heuristic(predictions: &[Label], cases: &[DiagnosticCase]) -> Result<HeuristicTable> {
    check_aligned(predictions.len(), cases.len())?;
    Ok(score_cells(
        predictions.iter().zip(cases).map(|(p, c)| (*p == c.label, c.tag)),
    ))
}

/// [`score_by_heuristic`] for encoded examples and predicted class indices.
pub fn score_examples(predictions: &[usize], examples: &[Example]) -> Result<HeuristicTable> {
    check_aligned(predictions.len(), examples.len())?;
    Ok(score_cells(
        predictions.iter().zip(examples).map(|(p, e)| (*p == e.label, e.tag)),
    ))
}

fn check_aligned(predictions: usize, cases: usize) -> Result<()> {
    if predictions != cases {
        return Err(Error::Input {
            position: predictions.min(cases),
            message: format!("{predictions} predictions for {cases} cases"),
        });
    }
    Ok(())
}

fn score_cells(outcomes: impl Iterator<Item = (bool, Option<(Heuristic, Subset)>)>) -> HeuristicTable {
    let outcomes: Vec<_> = outcomes.collect();
    let mut cells = Vec::with_capacity(6);
    for heuristic in Heuristic::ALL {
        for subset in Subset::ALL {
            let (mut correct, mut total) = (0, 0);
            for &(right, tag) in &outcomes {
                if tag == Some((heuristic, subset)) {
                    total += 1;
                    correct += usize::from(right);
                }
            }
            let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
            cells.push(CellScore {
                heuristic,
                subset,
                correct,
                total,
                accuracy,
            });
        }
    }
    HeuristicTable { cells }
}

/// Number of cases per (heuristic, subset) cell, in table order.
pub fn cell_counts(cases: &[DiagnosticCase]) -> Vec<((Heuristic, Subset), usize)> {
    Heuristic::ALL
        .into_iter()
        .flat_map(|h| Subset::ALL.into_iter().map(move |s| (h, s)))
        .map(|tag| (tag, cases.iter().filter(|c| c.tag == Some(tag)).count()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_order_swap_is_overlap_nonentailment() {
        let case = DiagnosticCase {
            premise: vec![12, 36, 13],
            hypothesis: vec![13, 36, 12],
            label: Label::NonEntailment,
            tag: Some((Heuristic::LexicalOverlap, Subset::HeuristicNonentailed)),
        };
        assert!(case.full_overlap());
        assert!(satisfies_heuristic(&case));
        assert!(!case.is_contiguous_subsequence());
    }

    #[test]
    fn suffix_is_a_subsequence() {
        let case = DiagnosticCase {
            premise: vec![8, 12, 36, 13],
            hypothesis: vec![12, 36, 13],
            label: Label::Entailment,
            tag: Some((Heuristic::Subsequence, Subset::HeuristicEntailed)),
        };
        assert!(satisfies_heuristic(&case));
    }

    #[test]
    fn corpus_cells_and_invariants() {
        let corpus = gen_hans_style_sized(0, 50, 400).unwrap();
        for ((_, _), count) in cell_counts(&corpus.diagnostic) {
            assert_eq!(count, 50);
        }
        for case in &corpus.diagnostic {
            assert!(satisfies_heuristic(case), "{case:?}");
            assert!(case.full_overlap(), "every probe hypothesis reuses premise words: {case:?}");
            assert!(case.to_example().tokens.len() <= ToyGrammar::MAX_PAIR_LEN);
        }
        assert_eq!(corpus.train.len(), 400);
        assert_eq!(corpus.train.iter().filter(|c| c.label == Label::Entailment).count(), 200);
        for case in &corpus.train {
            assert!(agrees_with_overlap(case), "{case:?}");
            assert!(case.to_example().tokens.len() <= ToyGrammar::MAX_PAIR_LEN);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_hans_style(3, 5).unwrap(), gen_hans_style(3, 5).unwrap());
        assert_ne!(gen_hans_style(3, 5).unwrap(), gen_hans_style(4, 5).unwrap());
    }

    #[test]
    fn local_task_definitions() {
        let spec = LocalTaskSpec::default();
        let (a, b) = spec.bigram;
        assert!(spec.contains_bigram(&[a, b, 5, 6]));
        assert!(!spec.contains_bigram(&[a, 5, b, 6]));
        assert!(!spec.contains_bigram(&[b, a, 6, 6]));
    }

    #[test]
    fn local_task_is_exactly_balanced() {
        let spec = LocalTaskSpec::default();
        let data = gen_local_pattern_task(0, 1000).unwrap();
        assert_eq!(data.len(), 1000);
        assert_eq!(data.iter().filter(|e| e.label == 1).count(), 500);
        for e in &data {
            assert_eq!(e.label == 1, spec.contains_bigram(&e.tokens));
            assert_eq!(e.tokens.len(), spec.len);
            assert_eq!(e.tokens[0], ToyGrammar::CLS);
        }
        let hard = data
            .iter()
            .filter(|e| e.label == 0 && e.tokens.contains(&spec.bigram.0) && e.tokens.contains(&spec.bigram.1))
            .count();
        assert!(hard >= 250, "{hard}");
    }

    #[test]
    fn corpus_files_round_trip() {
        let corpus = gen_hans_style_sized(1, 3, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        let mut f = fs::File::create(&path).unwrap();
        write_cases(&mut f, &corpus.train).unwrap();
        write_cases(&mut f, &corpus.diagnostic).unwrap();
        drop(f);
        let back = read_cases(&path).unwrap();
        assert_eq!(back.len(), 28);
        assert_eq!(&back[..10], &corpus.train[..]);
        assert_eq!(&back[10..], &corpus.diagnostic[..]);
        assert_eq!(read_examples(&path).unwrap()[0], corpus.train[0].to_example());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    const TOKENIZER: HashTokenizer = HashTokenizer {
        first_id: 2,
        vocab_size: 64,
    };

    #[test]
    fn hans_tsv_loads() {
        let f = write_tmp(
            "gold_label\tsentence1\tsentence2\theuristic\tsubcase\n\
             entailment\tThe doctor near the actor danced.\tThe doctor danced.\tsubsequence\tx\n\
             non-entailment\tThe doctor was paid by the actor.\tThe doctor paid the actor.\tlexical_overlap\ty\n",
        );
        let cases = load_hans_tsv(f.path(), &TOKENIZER).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].label, Label::Entailment);
        assert_eq!(cases[0].tag, Some((Heuristic::Subsequence, Subset::HeuristicEntailed)));
        assert_eq!(cases[1].label, Label::NonEntailment);
        assert_eq!(cases[1].subset(), Some(Subset::HeuristicNonentailed));
        assert_eq!(cases[0].hypothesis.len(), 3);
        assert_eq!(cases[0].premise[1], cases[0].hypothesis[1], "same word, same id");
        assert!(cases.iter().flat_map(|c| c.premise.iter()).all(|&t| (2..64).contains(&t)));
    }

    #[test]
    fn hans_tsv_missing_column() {
        let f = write_tmp("gold_label\tsentence1\theuristic\nentailment\ta b\tsubsequence\n");
        let err = load_hans_tsv(f.path(), &TOKENIZER).unwrap_err();
        assert!(matches!(&err, Error::Format(m) if m.contains("sentence2")), "{err}");
    }

    #[test]
    fn hans_tsv_unknown_label() {
        let f = write_tmp(
            "gold_label\tsentence1\tsentence2\theuristic\n\
             entailment\ta\tb\tconstituent\n\
             neutral\ta\tb\tconstituent\n",
        );
        let err = load_hans_tsv(f.path(), &TOKENIZER).unwrap_err();
        assert!(matches!(err, Error::Row { line: 3, .. }), "{err}");
    }

    #[test]
    fn scoring() {
        let corpus = gen_hans_style_sized(2, 10, 2).unwrap();
        let cases = &corpus.diagnostic;
        let truth: Vec<Label> = cases.iter().map(|c| c.label).collect();
        let table = score_by_heuristic(&truth, cases).unwrap();
        assert!(table.cells.iter().all(|c| c.accuracy == 1.0 && c.total == 10));

        let always = vec![Label::Entailment; cases.len()];
        let table = score_by_heuristic(&always, cases).unwrap();
        for h in Heuristic::ALL {
            assert_eq!(table.get(h, Subset::HeuristicEntailed).accuracy, 1.0);
            assert_eq!(table.get(h, Subset::HeuristicNonentailed).accuracy, 0.0);
        }
        assert!(matches!(score_by_heuristic(&always[1..], cases), Err(Error::Input { .. })));

        let mut csv = Vec::new();
        table.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 7);
    }

    #[test]
    fn random_predictions_score_near_half() {
        // 400 cases per cell: a fair coin lands within 4σ = 0.1 of 0.5
        // with probability > 0.9999.
        let corpus = gen_hans_style_sized(9, 400, 2).unwrap();
        let mut rng = seeded(11);
        let preds: Vec<Label> = corpus
            .diagnostic
            .iter()
            .map(|_| Label::from_class(rng.random_range(0..2)))
            .collect();
        let table = score_by_heuristic(&preds, &corpus.diagnostic).unwrap();
        for c in &table.cells {
            assert!((c.accuracy - 0.5).abs() < 0.1, "{c:?}");
        }
    }
}
