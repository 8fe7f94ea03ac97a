use std::cmp::Ordering;
use std::collections::BTreeSet;

use super::{block_trigrams, Hypothesis, NextTokenModel, SearchConfig};
use crate::error::Result;

/// Orders hypotheses so that "greater" means preferred: higher score, then
/// shorter, then lexicographically smaller ids.
#[derive(Clone, Debug)]
struct Ranked(Hypothesis);

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank(&self.0, &other.0)
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

pub(super) fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then_with(|| b.ids.len().cmp(&a.ids.len()))
        .then_with(|| b.ids.cmp(&a.ids))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchOutcome {
    /// Completed hypotheses in the order they were found.
    pub hypotheses: Vec<Hypothesis>,
    /// Partial hypotheses dropped because the model could not score them.
    pub failed: usize,
    pub expansions: usize,
    /// Best-first stopped at `max_expansions` before filling the pool.
    pub exhausted: bool,
}

impl SearchOutcome {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.iter().max_by(|a, b| rank(a, b))
    }
}

/// The top-k admissible one-token extensions of `h`.
fn extensions(h: &Hypothesis, log_probs: &[f64], config: &SearchConfig) -> Vec<Hypothesis> {
    let only_end = h.ids.len() + 1 >= config.max_summary_len;
    let mut tokens: Vec<u32> = (0..log_probs.len() as u32)
        .filter(|&t| log_probs[t as usize] > f64::NEG_INFINITY)
        .filter(|&t| {
            if only_end {
                t == config.end_id
            } else {
                !config.banned_ids.contains(&t)
            }
        })
        .filter(|&t| !config.trigram_blocking || block_trigrams(&h.ids, t))
        .collect();
    tokens.sort_by(|&a, &b| {
        log_probs[b as usize]
            .total_cmp(&log_probs[a as usize])
            .then(a.cmp(&b))
    });
    tokens.truncate(config.k);
    tokens
        .into_iter()
        .map(|t| {
            let mut ids = h.ids.clone();
            ids.push(t);
            Hypothesis {
                ids,
                score: h.score + log_probs[t as usize],
                completed: t == config.end_id,
            }
        })
        .collect()
}

fn root() -> Hypothesis {
    Hypothesis {
        ids: Vec::new(),
        score: 0.0,
        completed: false,
    }
}

/// Repeatedly expands the best partial summary on a capped priority heap;
/// completed summaries are collected until the answer pool is full.
pub fn best_first_search<M: NextTokenModel + ?Sized>(
    lm: &M,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    config.validate()?;
    let pool_size = config.pool_size();
    let mut out = SearchOutcome::default();
    let mut heap = BTreeSet::new();
    heap.insert(Ranked(root()));
    while out.hypotheses.len() < pool_size {
        let Some(Ranked(top)) = heap.pop_last() else {
            break;
        };
        if top.completed {
            out.hypotheses.push(top);
            continue;
        }
        if top.ids.len() > lm.capacity() {
            out.failed += 1;
            continue;
        }
        if out.expansions >= config.max_expansions {
            out.exhausted = true;
            break;
        }
        let log_probs = lm
            .next_log_probs(&[&top.ids])?
            .pop()
            .expect("one row per prefix");
        out.expansions += 1;
        for child in extensions(&top, &log_probs, config) {
            heap.insert(Ranked(child));
            if heap.len() > config.heap_capacity {
                heap.pop_first();
            }
        }
    }
    Ok(out)
}

/// Keeps the k best partial summaries per step. Candidates that complete
/// move to the answer pool and give up their beam slot.
pub fn beam_search<M: NextTokenModel + ?Sized>(
    lm: &M,
    config: &SearchConfig,
) -> Result<SearchOutcome> {
    config.validate()?;
    let pool_size = config.pool_size();
    let mut out = SearchOutcome::default();
    let mut beam = vec![root()];
    while !beam.is_empty() && out.hypotheses.len() < pool_size {
        let (live, overflow): (Vec<_>, Vec<_>) =
            beam.into_iter().partition(|h| h.ids.len() <= lm.capacity());
        out.failed += overflow.len();
        let prefixes: Vec<&[u32]> = live.iter().map(|h| &h.ids[..]).collect();
        let rows = lm.next_log_probs(&prefixes)?;
        out.expansions += live.len();
        let mut candidates: Vec<Hypothesis> = live
            .iter()
            .zip(&rows)
            .flat_map(|(h, lp)| extensions(h, lp, config))
            .collect();
        candidates.sort_by(|a, b| rank(b, a));
        candidates.truncate(config.k);
        beam = Vec::with_capacity(config.k);
        for c in candidates {
            if !c.completed {
                beam.push(c);
            } else if out.hypotheses.len() < pool_size {
                out.hypotheses.push(c);
            }
        }
    }
    Ok(out)
}

/// Highest-probability token at every step (beam search with k = 1).
pub fn greedy<M: NextTokenModel + ?Sized>(
    lm: &M,
    config: &SearchConfig,
) -> Result<Option<Hypothesis>> {
    let cfg = SearchConfig {
        k: 1,
        answer_pool_size: Some(1),
        ..config.clone()
    };
    Ok(beam_search(lm, &cfg)?.hypotheses.pop())
}

/// Target length in words: the greedy summary's word count plus `offset`,
/// or `fallback` if greedy decoding yields nothing.
pub fn predict_length<M: NextTokenModel + ?Sized>(
    lm: &M,
    config: &SearchConfig,
    offset: f64,
    fallback: f64,
    count_words: impl Fn(&[u32]) -> usize,
) -> Result<f64> {
    Ok(match greedy(lm, config)? {
        Some(h) => count_words(h.content()) as f64 + offset,
        None => fallback,
    })
}
