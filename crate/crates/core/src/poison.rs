//! Branching-sentence removal and the random-removal baseline.
//!
//! TraceGuard scans a trace in order and deletes every sentence that opens
//! with a branching discourse marker ("Wait", "Hold on", "Alternatively")
//! until the per-trace removal budget is spent. The random baseline deletes
//! the same number of uniformly chosen sentences instead.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trace::{ReasoningTrace, Sentence};

pub const DEFAULT_MARKERS: [&str; 3] = ["wait", "hold on", "alternatively"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MarkerError {
    #[error("marker set is empty")]
    Empty,
    #[error("marker {0:?} is empty or has surrounding whitespace")]
    BadMarker(String),
}

/// Discourse markers that identify a branching sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchingSet {
    markers: Vec<String>,
    case_sensitive: bool,
}

impl Default for BranchingSet {
    fn default() -> Self {
        BranchingSet {
            markers: DEFAULT_MARKERS.iter().map(|m| m.to_string()).collect(),
            case_sensitive: false,
        }
    }
}

impl BranchingSet {
    /// Builds a marker set. Markers are lowercased unless `case_sensitive`.
    pub fn new<I, S>(markers: I, case_sensitive: bool) -> Result<Self, MarkerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vec::new();
        for m in markers {
            let m: String = m.into();
            if m.is_empty() || m.trim() != m {
                return Err(MarkerError::BadMarker(m));
            }
            out.push(if case_sensitive { m } else { m.to_lowercase() });
        }
        if out.is_empty() {
            return Err(MarkerError::Empty);
        }
        Ok(BranchingSet {
            markers: out,
            case_sensitive,
        })
    }

    /// Parses a marker file: one marker per line, blank lines and lines
    /// starting with `#` ignored.
    pub fn parse(config: &str, case_sensitive: bool) -> Result<Self, MarkerError> {
        let lines = config
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        Self::new(lines, case_sensitive)
    }

    pub fn markers(&self) -> &[String] {
        &self.markers
    }

    pub fn case_sensitive(&self) -> bool {
        self.case_sensitive
    }

    /// True if `text` opens with one of the markers at a word boundary, after
    /// leading whitespace, quotes and dashes are stripped.
    pub fn matches(&self, text: &str) -> bool {
        let stripped = text.trim_start_matches(|c: char| {
            c.is_whitespace()
                || matches!(
                    c,
                    '"' | '\''
                        | '`'
                        | '*'
                        | '-'
                        | '\u{2013}'
                        | '\u{2014}'
                        | '\u{201c}'
                        | '\u{201d}'
                        | '\u{2018}'
                        | '\u{2019}'
                        | '\u{ab}'
                        | '\u{bb}'
                )
        });
        let folded;
        let hay = if self.case_sensitive {
            stripped
        } else {
            folded = stripped.to_lowercase();
            folded.as_str()
        };
        self.markers.iter().any(|m| prefix_at_word_boundary(hay, m))
    }
}

/// `marker` is a prefix of `hay` and is not followed by a word character.
/// Spaces inside a multi-word marker match any run of whitespace.
fn prefix_at_word_boundary(hay: &str, marker: &str) -> bool {
    let mut rest = hay;
    for (i, word) in marker.split(' ').filter(|w| !w.is_empty()).enumerate() {
        if i > 0 {
            let trimmed = rest.trim_start();
            if trimmed.len() == rest.len() {
                return false;
            }
            rest = trimmed;
        }
        match rest.strip_prefix(word) {
            Some(r) => rest = r,
            None => return false,
        }
    }
    !rest.starts_with(|c: char| c.is_alphanumeric() || c == '_')
}

pub fn is_branching(sentence: &Sentence, set: &BranchingSet) -> bool {
    set.matches(&sentence.text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoisonMethod {
    Traceguard,
    Random,
    Gaussian,
}

impl fmt::Display for PoisonMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoisonMethod::Traceguard => "traceguard",
            PoisonMethod::Random => "random",
            PoisonMethod::Gaussian => "gaussian",
        })
    }
}

impl FromStr for PoisonMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traceguard" => Ok(PoisonMethod::Traceguard),
            "random" => Ok(PoisonMethod::Random),
            "gaussian" => Ok(PoisonMethod::Gaussian),
            other => Err(format!("unknown poisoning method {other:?}")),
        }
    }
}

/// Provenance of one poisoned trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonReport {
    pub trace_id: String,
    pub method: PoisonMethod,
    /// Original sentence ordinals, in scan order.
    pub removed_indices: Vec<usize>,
    pub removed_token_count: usize,
    pub total_token_count: usize,
    pub budget: usize,
    pub seed: Option<u64>,
}

/// Drops the sentences at `removed` (sorted, in range) and re-indexes the rest.
///
/// A removed sentence takes its leading separator with it. When the removed
/// sentence opens the surviving text, the next survivor inherits its
/// separator instead, so the poisoned text starts the way the original did.
fn remove_sentences(trace: &ReasoningTrace, removed: &BTreeSet<usize>) -> ReasoningTrace {
    let mut kept: Vec<Sentence> = Vec::with_capacity(trace.sentences.len() - removed.len());
    let mut pending_separator: Option<&str> = None;
    for s in &trace.sentences {
        if removed.contains(&s.index) {
            if kept.is_empty() && pending_separator.is_none() {
                pending_separator = Some(&s.leading_separator);
            }
            continue;
        }
        let mut s = s.clone();
        if kept.is_empty() {
            if let Some(sep) = pending_separator {
                s.leading_separator = sep.to_string();
            }
        }
        s.index = kept.len();
        kept.push(s);
    }
    ReasoningTrace {
        id: trace.id.clone(),
        prompt: trace.prompt.clone(),
        sentences: kept,
        answer: trace.answer.clone(),
        extra: trace.extra.clone(),
    }
}

fn removed_tokens(trace: &ReasoningTrace, removed: &[usize]) -> usize {
    removed
        .iter()
        .map(|&i| trace.sentences[i].token_count)
        .sum()
}

/// Removes branching sentences in order until `k` have been removed.
pub fn traceguard_poison(
    trace: &ReasoningTrace,
    set: &BranchingSet,
    k: usize,
) -> (ReasoningTrace, PoisonReport) {
    let mut removed = Vec::new();
    for s in &trace.sentences {
        if removed.len() >= k {
            break;
        }
        if is_branching(s, set) {
            removed.push(s.index);
        }
    }
    let report = PoisonReport {
        trace_id: trace.id.clone(),
        method: PoisonMethod::Traceguard,
        removed_token_count: removed_tokens(trace, &removed),
        total_token_count: trace.token_count(),
        budget: k,
        seed: None,
        removed_indices: removed,
    };
    let set: BTreeSet<usize> = report.removed_indices.iter().copied().collect();
    (remove_sentences(trace, &set), report)
}

/// Removes `min(m, n)` sentences chosen uniformly without replacement.
pub fn random_poison(
    trace: &ReasoningTrace,
    m: usize,
    seed: u64,
) -> (ReasoningTrace, PoisonReport) {
    let n = trace.sentences.len();
    let mut rng = seed::rng(seed);
    let chosen: BTreeSet<usize> = index::sample(&mut rng, n, m.min(n)).into_iter().collect();
    let removed: Vec<usize> = chosen.iter().copied().collect();
    let report = PoisonReport {
        trace_id: trace.id.clone(),
        method: PoisonMethod::Random,
        removed_token_count: removed_tokens(trace, &removed),
        total_token_count: trace.token_count(),
        budget: m,
        seed: Some(seed),
        removed_indices: removed,
    };
    (remove_sentences(trace, &chosen), report)
}

/// A random-removal run whose sentence count matches a TraceGuard run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedRun {
    pub poisoned: ReasoningTrace,
    pub report: PoisonReport,
    pub traceguard_removed: usize,
    pub traceguard_removed_tokens: usize,
}

/// Runs TraceGuard with budget `k` to learn how many sentences it removes,
/// then removes that many random sentences instead.
///
/// The returned report carries budget `k`, so matched runs group with the
/// TraceGuard runs they mirror.
pub fn match_budget_random(
    trace: &ReasoningTrace,
    set: &BranchingSet,
    k: usize,
    seed: u64,
) -> MatchedRun {
    let (_, tg) = traceguard_poison(trace, set, k);
    let (poisoned, mut report) = random_poison(trace, tg.removed_indices.len(), seed);
    report.budget = k;
    MatchedRun {
        poisoned,
        report,
        traceguard_removed: tg.removed_indices.len(),
        traceguard_removed_tokens: tg.removed_token_count,
    }
}

/// Corpus-level poisoning settings.
#[derive(Debug, Clone)]
pub struct PoisonConfig {
    pub method: PoisonMethod,
    /// TraceGuard budget, or the sentence count for plain random removal.
    pub k: usize,
    pub markers: BranchingSet,
    /// For random removal: match each trace's TraceGuard removal count.
    pub match_traceguard: bool,
    pub seed: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoisonError {
    #[error("method {0} does not apply to reasoning traces")]
    UnsupportedMethod(PoisonMethod),
    #[error("cannot build a pool of {0} worker threads")]
    ThreadPool(usize),
}

fn poison_one(trace: &ReasoningTrace, config: &PoisonConfig) -> (ReasoningTrace, PoisonReport) {
    match config.method {
        PoisonMethod::Traceguard => traceguard_poison(trace, &config.markers, config.k),
        _ => {
            let seed = seed::for_label(config.seed, &trace.id);
            if config.match_traceguard {
                let run = match_budget_random(trace, &config.markers, config.k, seed);
                (run.poisoned, run.report)
            } else {
                random_poison(trace, config.k, seed)
            }
        }
    }
}

/// Poisons every trace on a pool of `threads` workers (0 = rayon default).
///
/// Output order follows input order, and per-trace seeds depend only on the
/// global seed and the trace id, so the result is independent of `threads`.
pub fn poison_corpus(
    traces: &[ReasoningTrace],
    config: &PoisonConfig,
    threads: usize,
) -> Result<Vec<(ReasoningTrace, PoisonReport)>, PoisonError> {
    if config.method == PoisonMethod::Gaussian {
        return Err(PoisonError::UnsupportedMethod(config.method));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|_| PoisonError::ThreadPool(threads))?;
    Ok(pool.install(|| traces.par_iter().map(|t| poison_one(t, config)).collect()))
}
