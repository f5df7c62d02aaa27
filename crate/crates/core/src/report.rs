//! Token-accounting tables built from poisoning reports.

use std::collections::BTreeMap;
use std::io::Write;

use crate::poison::{PoisonMethod, PoisonReport};

/// Aggregate over all reports sharing a method and budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    pub method: PoisonMethod,
    pub budget: usize,
    pub traces: usize,
    pub mean_tokens_removed: f64,
    pub median_tokens_removed: f64,
    pub mean_sentences_removed: f64,
    pub mean_total_tokens: f64,
    /// Number of traces per removed-sentence count.
    pub sentence_histogram: BTreeMap<usize, usize>,
}

pub const BUDGET_HEADER: [&str; 8] = [
    "method",
    "budget",
    "traces",
    "mean_tokens_removed",
    "median_tokens_removed",
    "mean_sentences_removed",
    "mean_total_tokens",
    "sentences_removed_histogram",
];

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Groups reports by `(method, budget)`, ordered by method then budget.
pub fn aggregate<'a, I>(reports: I) -> Vec<BudgetRow>
where
    I: IntoIterator<Item = &'a PoisonReport>,
{
    let mut groups: BTreeMap<(PoisonMethod, usize), Vec<&PoisonReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.method, r.budget)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((method, budget), rs)| {
            let n = rs.len() as f64;
            let mut tokens: Vec<usize> = rs.iter().map(|r| r.removed_token_count).collect();
            tokens.sort_unstable();
            let mut sentence_histogram = BTreeMap::new();
            for r in &rs {
                *sentence_histogram
                    .entry(r.removed_indices.len())
                    .or_insert(0) += 1;
            }
            BudgetRow {
                method,
                budget,
                traces: rs.len(),
                mean_tokens_removed: tokens.iter().sum::<usize>() as f64 / n,
                median_tokens_removed: median(&tokens),
                mean_sentences_removed: rs.iter().map(|r| r.removed_indices.len()).sum::<usize>()
                    as f64
                    / n,
                mean_total_tokens: rs.iter().map(|r| r.total_token_count).sum::<usize>() as f64 / n,
                sentence_histogram,
            }
        })
        .collect()
}

fn histogram_cell(h: &BTreeMap<usize, usize>) -> String {
    h.iter()
        .map(|(k, v)| format!("{k}:{v}"))
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes rows as CSV with a header row.
pub fn write_budget_table<W: Write>(rows: &[BudgetRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BUDGET_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.budget.to_string(),
            r.traces.to_string(),
            r.mean_tokens_removed.to_string(),
            r.median_tokens_removed.to_string(),
            r.mean_sentences_removed.to_string(),
            r.mean_total_tokens.to_string(),
            histogram_cell(&r.sentence_histogram),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One trace poisoned both ways at the same budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub trace_id: String,
    pub budget: usize,
    pub traceguard_sentences: usize,
    pub random_sentences: usize,
    pub traceguard_tokens: usize,
    pub random_tokens: usize,
}

pub const COMPARISON_HEADER: [&str; 6] = [
    "trace_id",
    "budget",
    "traceguard_sentences",
    "random_sentences",
    "traceguard_tokens",
    "random_tokens",
];

/// Pairs TraceGuard and random reports by trace id and budget, in the order
/// of `traceguard`. Reports without a partner are skipped.
pub fn compare(traceguard: &[PoisonReport], random: &[PoisonReport]) -> Vec<ComparisonRow> {
    let by_key: BTreeMap<(&str, usize), &PoisonReport> = random
        .iter()
        .filter(|r| r.method == PoisonMethod::Random)
        .map(|r| ((r.trace_id.as_str(), r.budget), r))
        .collect();
    traceguard
        .iter()
        .filter(|t| t.method == PoisonMethod::Traceguard)
        .filter_map(|t| {
            let r = by_key.get(&(t.trace_id.as_str(), t.budget))?;
            Some(ComparisonRow {
                trace_id: t.trace_id.clone(),
                budget: t.budget,
                traceguard_sentences: t.removed_indices.len(),
                random_sentences: r.removed_indices.len(),
                traceguard_tokens: t.removed_token_count,
                random_tokens: r.removed_token_count,
            })
        })
        .collect()
}

pub fn write_comparison_table<W: Write>(rows: &[ComparisonRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_HEADER)?;
    for r in rows {
        w.write_record([
            r.trace_id.clone(),
            r.budget.to_string(),
            r.traceguard_sentences.to_string(),
            r.random_sentences.to_string(),
            r.traceguard_tokens.to_string(),
            r.random_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
