//! Summary generation: the model is queried with a MASK token appended to the
//! partial summary, and best-first or beam search assembles whole summaries,
//! optionally reranked with copy- or length-aware scores.

mod rerank;
mod search;

pub use rerank::{
    bp_norm, brevity_penalty, length_norm, logistic, rerank, sbwr_reward, CandidateFeatures,
    CopyScaling, RerankConfig, RerankMethod, Reranked,
};
pub use search::{beam_search, best_first_search, greedy, predict_length, SearchOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{CopyTransModel, JointSequence, PackedBatch};
use crate::numerics::{log_softmax, Tape};
use crate::rng::StreamRng;
use crate::tokenizer::SpecialIds;

/// Anything that scores the next token given a partial summary.
pub trait NextTokenModel {
    fn vocab_size(&self) -> usize;

    /// Longest partial summary that can still be scored.
    fn capacity(&self) -> usize {
        usize::MAX
    }

    /// Natural-log next-token probabilities, one row per prefix.
    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

/// The trained model conditioned on one source: each query is the sequence
/// `[START, x, END, y_<j, MASK]`, read out at the MASK position.
pub struct MaskPrompt<'a> {
    model: &'a CopyTransModel,
    source: Vec<u32>,
}

impl<'a> MaskPrompt<'a> {
    /// Keeps as much of the source as leaves room for `min_summary` tokens.
    pub fn new(model: &'a CopyTransModel, source: &[u32], min_summary: usize) -> Self {
        let room = model
            .config()
            .max_positions
            .saturating_sub(3 + min_summary)
            .max(1);
        let source = source[..source.len().min(room)].to_vec();
        MaskPrompt { model, source }
    }

    pub fn source(&self) -> &[u32] {
        &self.source
    }
}

impl NextTokenModel for MaskPrompt<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn capacity(&self) -> usize {
        self.model
            .config()
            .max_positions
            .saturating_sub(self.source.len() + 3)
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let seqs = prefixes
            .iter()
            .map(|p| JointSequence::prompt(&self.source, p))
            .collect::<Result<Vec<_>>>()?;
        let batch = PackedBatch::new(&seqs)?;
        let rows: Vec<usize> = seqs
            .iter()
            .zip(&batch.offsets)
            .map(|(s, &o)| o + s.len() - 1)
            .collect();
        let mut tape = Tape::new(self.model.store());
        let h = self.model.forward::<StreamRng>(&mut tape, &batch, None)?;
        let picked = tape.gather_rows(h, &rows)?;
        let logits = self.model.predict_logits(&mut tape, picked)?;
        let v = self.vocab_size();
        tape.value(logits)
            .data()
            .chunks(v)
            .map(log_softmax)
            .collect()
    }
}

/// Softmax at the MASK position for `[START, x, END, partial, MASK]`.
pub fn next_token_distribution(
    model: &CopyTransModel,
    source: &[u32],
    partial: &[u32],
) -> Result<Vec<f64>> {
    let total = source.len() + partial.len() + 3;
    contract!(
        total <= model.config().max_positions,
        "prompt of {total} positions exceeds max_positions {}",
        model.config().max_positions
    );
    let prompt = MaskPrompt {
        model,
        source: source.to_vec(),
    };
    let row = prompt
        .next_log_probs(&[partial])?
        .pop()
        .expect("one prefix");
    Ok(row.into_iter().map(f64::exp).collect())
}

/// A partial or finished summary with its accumulated log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub score: f64,
    pub completed: bool,
}

impl Hypothesis {
    /// Summary tokens without the closing END.
    pub fn content(&self) -> &[u32] {
        if self.completed {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k: usize,
    pub heap_capacity: usize,
    /// Completed hypotheses to collect before stopping; `None` means `k`.
    pub answer_pool_size: Option<usize>,
    /// Maximum summary length in tokens, END included.
    pub max_summary_len: usize,
    pub trigram_blocking: bool,
    /// Upper bound on best-first expansions, as a guard against weak models.
    pub max_expansions: usize,
    pub end_id: u32,
    /// Tokens never generated.
    pub banned_ids: Vec<u32>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let s = SpecialIds::RESERVED;
        SearchConfig {
            k: 5,
            heap_capacity: 100_000,
            answer_pool_size: None,
            max_summary_len: 32,
            trigram_blocking: true,
            max_expansions: 20_000,
            end_id: s.end,
            banned_ids: vec![s.start, s.mask, s.unk],
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.heap_capacity < self.k {
            return fail("heap_capacity must be at least k");
        }
        if self.answer_pool_size == Some(0) {
            return fail("answer_pool_size must be positive");
        }
        if self.max_summary_len == 0 {
            return fail("max_summary_len must be positive");
        }
        if self.banned_ids.contains(&self.end_id) {
            return fail("END cannot be banned");
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.answer_pool_size.unwrap_or(self.k)
    }
}

/// False iff appending `candidate` would repeat a trigram already in `ids`.
pub fn block_trigrams(ids: &[u32], candidate: u32) -> bool {
    let n = ids.len();
    if n < 2 {
        return true;
    }
    let (a, b) = (ids[n - 2], ids[n - 1]);
    !ids.windows(3).any(|w| w == [a, b, candidate])
}

/// True if some trigram occurs twice in `items`.
pub fn has_repeated_trigram<T: Eq + std::hash::Hash>(items: &[T]) -> bool {
    let mut seen = std::collections::HashSet::new();
    items.windows(3).any(|w| !seen.insert(w))
}
