//! Copy rate (share of summary n-grams found in the source) and ROUGE-1/2/L.
//! Everything works on lowercased, whitespace-separated words.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COPY_ORDERS: [usize; 4] = [1, 2, 3, 4];

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// `(copied, total)` n-gram occurrence counts of `summary` against `source`.
fn copy_counts(summary: &[String], source: &[String], n: usize) -> (usize, usize) {
    if n == 0 || summary.len() < n {
        return (0, 0);
    }
    let grams: HashSet<&[String]> = source.windows(n).collect();
    let total = summary.len() - n + 1;
    (
        summary.windows(n).filter(|g| grams.contains(g)).count(),
        total,
    )
}

/// Percentage of the summary's n-grams that occur anywhere in the source;
/// `None` when the summary has fewer than `n` words.
pub fn copy_rate(summary: &str, source: &str, n: usize) -> Option<f64> {
    let (hit, total) = copy_counts(&words(summary), &words(source), n);
    (total > 0).then(|| 100.0 * hit as f64 / total as f64)
}

/// Rates for n = 1..4 and their mean over the orders that are defined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CopyRateReport {
    pub rates: [Option<f64>; 4],
    pub average: Option<f64>,
}

impl CopyRateReport {
    fn from_rates(rates: [Option<f64>; 4]) -> Self {
        let defined: Vec<f64> = rates.iter().flatten().copied().collect();
        let average =
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        CopyRateReport { rates, average }
    }
}

pub fn copy_rates(summary: &str, source: &str) -> CopyRateReport {
    let (s, x) = (words(summary), words(source));
    CopyRateReport::from_rates(COPY_ORDERS.map(|n| {
        let (hit, total) = copy_counts(&s, &x, n);
        (total > 0).then(|| 100.0 * hit as f64 / total as f64)
    }))
}

/// Corpus copy rate: `micro` pools n-gram counts over all summaries,
/// `macro_avg` averages the per-summary rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusCopyRate {
    pub micro: CopyRateReport,
    pub macro_avg: CopyRateReport,
    pub summaries: usize,
}

pub fn corpus_copy_rate<S: AsRef<str>, T: AsRef<str>>(pairs: &[(S, T)]) -> CorpusCopyRate {
    let mut hits = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for (summary, source) in pairs {
        let (s, x) = (words(summary.as_ref()), words(source.as_ref()));
        for (k, &n) in COPY_ORDERS.iter().enumerate() {
            let (hit, total) = copy_counts(&s, &x, n);
            hits[k] += hit;
            totals[k] += total;
            if total > 0 {
                sums[k] += 100.0 * hit as f64 / total as f64;
                counts[k] += 1;
            }
        }
    }
    let ratio = |a: f64, b: usize| (b > 0).then(|| a / b as f64);
    CorpusCopyRate {
        micro: CopyRateReport::from_rates(std::array::from_fn(|k| {
            ratio(100.0 * hits[k] as f64, totals[k])
        })),
        macro_avg: CopyRateReport::from_rates(std::array::from_fn(|k| ratio(sums[k], counts[k]))),
        summaries: pairs.len(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate > 0 {
            overlap as f64 / candidate as f64
        } else {
            0.0
        };
        let recall = if reference > 0 {
            overlap as f64 / reference as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for g in tokens.windows(n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> RougeScore {
    let (c, r) = (words(candidate), words(reference));
    if n == 0 {
        return RougeScore::default();
    }
    let (cc, rc) = (ngram_counts(&c, n), ngram_counts(&r, n));
    let overlap = cc
        .iter()
        .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(
        overlap,
        c.len().saturating_sub(n - 1),
        r.len().saturating_sub(n - 1),
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence precision, recall and F1.
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    let (c, r) = (words(candidate), words(reference));
    RougeScore::from_counts(lcs_len(&c, &r), c.len(), r.len())
}

/// Mean ROUGE scores over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeSummary {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
    /// Pairs whose reference was empty (scored as zero).
    pub empty_references: usize,
}

/// One system's row of the evaluation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub system: String,
    pub copy: CorpusCopyRate,
    pub rouge: RougeSummary,
}

/// Scores `hypotheses` against `references` (ROUGE) and `sources` (copy rate).
pub fn evaluate(
    system: &str,
    hypotheses: &[String],
    references: &[String],
    sources: &[String],
) -> Result<EvaluationRow> {
    if hypotheses.len() != references.len() || hypotheses.len() != sources.len() {
        return Err(Error::Data(format!(
            "line counts differ: {} hypotheses, {} references, {} sources",
            hypotheses.len(),
            references.len(),
            sources.len()
        )));
    }
    let pairs: Vec<(&String, &String)> = hypotheses.iter().zip(sources).collect();
    let copy = corpus_copy_rate(&pairs);
    let mut rouge = RougeSummary::default();
    let add = |acc: &mut RougeScore, s: RougeScore| {
        acc.precision += s.precision;
        acc.recall += s.recall;
        acc.f1 += s.f1;
    };
    for (h, r) in hypotheses.iter().zip(references) {
        if words(r).is_empty() {
            rouge.empty_references += 1;
        }
        add(&mut rouge.rouge1, rouge_n(h, r, 1));
        add(&mut rouge.rouge2, rouge_n(h, r, 2));
        add(&mut rouge.rouge_l, rouge_l(h, r));
    }
    let n = hypotheses.len().max(1) as f64;
    for s in [&mut rouge.rouge1, &mut rouge.rouge2, &mut rouge.rouge_l] {
        s.precision /= n;
        s.recall /= n;
        s.f1 /= n;
    }
    Ok(EvaluationRow {
        system: system.to_string(),
        copy,
        rouge,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Aligned text table: micro copy rates for n = 1..4 and their average, then
/// ROUGE F1 (×100).
pub fn render_table(rows: &[EvaluationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.system.len())
        .max()
        .unwrap_or(0)
        .max("system".len());
    let mut out = String::new();
    let header = [
        "1-gram", "2-gram", "3-gram", "4-gram", "Average", "R-1", "R-2", "R-L",
    ];
    let _ = write!(out, "{:<width$}", "system");
    for h in header {
        let _ = write!(out, " {h:>8}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.system);
        let c = r.copy.micro;
        let cells = [
            cell(c.rates[0]),
            cell(c.rates[1]),
            cell(c.rates[2]),
            cell(c.rates[3]),
            cell(c.average),
            cell(Some(100.0 * r.rouge.rouge1.f1)),
            cell(Some(100.0 * r.rouge.rouge2.f1)),
            cell(Some(100.0 * r.rouge.rouge_l.f1)),
        ];
        for v in cells {
            let _ = write!(out, " {v:>8}");
        }
        out.push('\n');
    }
    out
}

pub fn rows_to_jsonl(rows: &[EvaluationRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}
