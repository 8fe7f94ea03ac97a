//! Copy control at training time: summary tokens are split into those seen in
//! the source and those unseen, each category is sampled at its own rate, and
//! only the sampled positions contribute to the loss.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{CopyTransModel, JointSequence, PackedBatch};
use crate::numerics::{Adam, AdamConfig, PlateauHalving, Reduction, Tape, Var};
use crate::rng::{substream, StreamRng};
use crate::tokenizer::SpecialIds;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub source_ids: Vec<u32>,
    pub summary_ids: Vec<u32>,
}

/// A joint sequence plus how many source tokens had to be dropped to fit.
#[derive(Clone, Debug)]
pub struct BuiltSequence {
    pub seq: JointSequence,
    pub truncated: usize,
}

/// `[START, x, END, y, END]`, cutting the source tail if the whole thing
/// exceeds `max_positions`. The summary is never shortened.
pub fn build_joint_sequence(
    example: &TrainingExample,
    max_positions: usize,
) -> Result<BuiltSequence> {
    contract!(!example.source_ids.is_empty(), "empty source");
    contract!(!example.summary_ids.is_empty(), "empty summary");
    let fixed = example.summary_ids.len() + 3;
    if fixed + 1 > max_positions {
        return Err(Error::Data(format!(
            "summary of {} tokens cannot fit in {max_positions} positions",
            example.summary_ids.len()
        )));
    }
    let keep = example.source_ids.len().min(max_positions - fixed);
    let seq = JointSequence::with_target(&example.source_ids[..keep], &example.summary_ids)?;
    Ok(BuiltSequence {
        seq,
        truncated: example.source_ids.len() - keep,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    SeenSummary,
    UnseenSummary,
    Source,
}

/// Summary tokens whose id occurs among the source ids are seen; the closing
/// END always counts as seen so that copy-only training still learns to stop.
pub fn categorize_tokens(seq: &JointSequence) -> Vec<TokenCategory> {
    let specials = SpecialIds::RESERVED;
    let source: HashSet<u32> = seq.ids[..seq.source_len]
        .iter()
        .copied()
        .filter(|&id| !specials.is_special(id))
        .collect();
    let last = seq.len() - 1;
    seq.ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            if i < seq.source_len {
                TokenCategory::Source
            } else if source.contains(&id) || (i == last && id == specials.end) {
                TokenCategory::SeenSummary
            } else {
                TokenCategory::UnseenSummary
            }
        })
        .collect()
}

/// How selected tokens are corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMix {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for CorruptionMix {
    fn default() -> Self {
        CorruptionMix {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub p_seen: f64,
    pub p_unseen: f64,
    pub p_source: f64,
    #[serde(default)]
    pub mix: CorruptionMix,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            p_seen: 0.9,
            p_unseen: 0.9,
            p_source: 0.1,
            mix: CorruptionMix::default(),
        }
    }
}

/// Named rate bundles for the eight training configurations `case-a` … `case-h`.
pub const PRESET_NAMES: [&str; 8] = [
    "case-a", "case-b", "case-c", "case-d", "case-e", "case-f", "case-g", "case-h",
];

impl SamplingConfig {
    pub fn new(p_seen: f64, p_unseen: f64, p_source: f64) -> Result<Self> {
        let c = SamplingConfig {
            p_seen,
            p_unseen,
            p_source,
            mix: CorruptionMix::default(),
        };
        c.validate()?;
        Ok(c)
    }

    /// a: seen only; b: seen and unseen at 2:1; c: all summary tokens;
    /// d: unseen-heavy. e–h repeat a–d with source tokens sampled at 0.1.
    pub fn preset(name: &str) -> Result<Self> {
        let (seen, unseen) = match name.strip_prefix("case-") {
            Some("a" | "e") => (0.9, 0.0),
            Some("b" | "f") => (0.9, 0.45),
            Some("c" | "g") => (0.9, 0.9),
            Some("d" | "h") => (0.45, 0.9),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?} (expected case-a … case-h)"
                )))
            }
        };
        let source = if matches!(name, "case-e" | "case-f" | "case-g" | "case-h") {
            0.1
        } else {
            0.0
        };
        SamplingConfig::new(seen, unseen, source)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_seen", self.p_seen),
            ("p_unseen", self.p_unseen),
            ("p_source", self.p_source),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        let m = self.mix;
        if [m.mask, m.random, m.keep]
            .iter()
            .any(|&f| !(0.0..=1.0).contains(&f))
            || (m.mask + m.random + m.keep - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "corruption mix {m:?} must be fractions summing to 1"
            )));
        }
        Ok(())
    }

    pub fn rate(&self, category: TokenCategory) -> f64 {
        match category {
            TokenCategory::SeenSummary => self.p_seen,
            TokenCategory::UnseenSummary => self.p_unseen,
            TokenCategory::Source => self.p_source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// The positions that enter the loss, in increasing order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SelectionRecord {
    pub positions: Vec<usize>,
    pub original: Vec<u32>,
    pub actions: Vec<Corruption>,
}

impl SelectionRecord {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Selects each position with its category's rate and corrupts the selected
/// ones: MASK, a random ordinary token, or left as is.
pub fn sample_and_corrupt<R: Rng>(
    seq: &JointSequence,
    categories: &[TokenCategory],
    config: &SamplingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(JointSequence, SelectionRecord)> {
    contract!(
        categories.len() == seq.len(),
        "{} categories for {} tokens",
        categories.len(),
        seq.len()
    );
    let first_ordinary = SpecialIds::COUNT;
    contract!(
        vocab_size as u32 > first_ordinary,
        "vocabulary of {vocab_size} has no ordinary tokens"
    );
    let mut ids = seq.ids.clone();
    let mut record = SelectionRecord::default();
    for (i, &cat) in categories.iter().enumerate() {
        let p = config.rate(cat);
        if p == 0.0 || rng.random::<f64>() >= p {
            continue;
        }
        let u = rng.random::<f64>();
        let action = if u < config.mix.mask {
            Corruption::Mask
        } else if u < config.mix.mask + config.mix.random {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        record.positions.push(i);
        record.original.push(ids[i]);
        record.actions.push(action);
        match action {
            Corruption::Mask => ids[i] = SpecialIds::RESERVED.mask,
            Corruption::Random => ids[i] = rng.random_range(first_ordinary..vocab_size as u32),
            Corruption::Keep => {}
        }
    }
    Ok((seq.with_ids(ids)?, record))
}

/// A corrupted sequence and the original tokens the model must recover.
#[derive(Clone, Debug)]
pub struct CorruptedExample {
    pub seq: JointSequence,
    pub record: SelectionRecord,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean: f64,
    pub sum: f64,
    pub positions: usize,
}

/// Records the loss graph for a batch: negative log-likelihood of the original
/// token at every selected position, read from the corrupted sequence's states.
/// Returns `None` when nothing was selected.
pub fn batch_loss<R: Rng>(
    model: &CopyTransModel,
    tape: &mut Tape,
    items: &[CorruptedExample],
    reduction: Reduction,
    dropout_rng: Option<&mut R>,
) -> Result<Option<(Var, LossStats)>> {
    let seqs: Vec<JointSequence> = items.iter().map(|c| c.seq.clone()).collect();
    let batch = PackedBatch::new(&seqs)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (item, &offset) in items.iter().zip(&batch.offsets) {
        rows.extend(item.record.positions.iter().map(|&p| offset + p));
        targets.extend_from_slice(&item.record.original);
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let h = model.forward(tape, &batch, dropout_rng)?;
    let picked = tape.gather_rows(h, &rows)?;
    let logits = model.predict_logits(tape, picked)?;
    let loss = tape.cross_entropy(logits, &targets, reduction)?;
    let value = tape.value(loss).item()?;
    let n = rows.len() as f64;
    let (sum, mean) = match reduction {
        Reduction::Sum => (value, value / n),
        Reduction::Mean => (value * n, value),
    };
    Ok(Some((
        loss,
        LossStats {
            mean,
            sum,
            positions: rows.len(),
        },
    )))
}

/// Loss of one corrupted example without dropout; `None` if nothing was selected.
pub fn compute_loss(
    model: &CopyTransModel,
    corrupted: &JointSequence,
    record: &SelectionRecord,
) -> Result<Option<LossStats>> {
    let mut tape = Tape::new(model.store());
    let item = CorruptedExample {
        seq: corrupted.clone(),
        record: record.clone(),
    };
    Ok(batch_loss::<StreamRng>(
        model,
        &mut tape,
        std::slice::from_ref(&item),
        Reduction::Mean,
        None,
    )?
    .map(|(_, s)| s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub sampling: SamplingConfig,
    pub reduction: Reduction,
    /// Linear learning-rate warm-up, in optimizer steps.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: Option<f64>,
    pub plateau_epsilon: f64,
    /// Steps without validation improvement before the rate halves.
    pub plateau_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 16,
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            sampling: SamplingConfig::default(),
            reduction: Reduction::Mean,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            plateau_epsilon: 1e-4,
            plateau_window: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub loss_sum: f64,
    pub positions: usize,
    pub lr: f64,
    pub step: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Source tokens dropped to respect `max_positions`.
    pub truncated_tokens: usize,
    pub truncated_examples: usize,
    /// Example passes with no selected position (contributing no loss).
    pub skipped_examples: usize,
    pub lr_halvings: usize,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn last(&self, split: Split) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

struct Prepared {
    seq: JointSequence,
    categories: Vec<TokenCategory>,
}

fn prepare(
    examples: &[TrainingExample],
    max_positions: usize,
    report: &mut TrainReport,
) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .map(|ex| {
            let built = build_joint_sequence(ex, max_positions)?;
            if built.truncated > 0 {
                report.truncated_tokens += built.truncated;
                report.truncated_examples += 1;
            }
            let categories = categorize_tokens(&built.seq);
            Ok(Prepared {
                seq: built.seq,
                categories,
            })
        })
        .collect()
}

fn corrupt_all<R: Rng>(
    items: &[&Prepared],
    config: &SamplingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<(Vec<CorruptedExample>, usize)> {
    let mut out = Vec::with_capacity(items.len());
    let mut skipped = 0;
    for p in items {
        let (seq, record) = sample_and_corrupt(&p.seq, &p.categories, config, vocab_size, rng)?;
        if record.is_empty() {
            skipped += 1;
        } else {
            out.push(CorruptedExample { seq, record });
        }
    }
    Ok((out, skipped))
}

/// Mean selected-position loss over `data`, with corruption drawn from a
/// fixed stream so successive evaluations are comparable.
fn evaluate(
    model: &CopyTransModel,
    data: &[Prepared],
    config: &TrainConfig,
) -> Result<Option<LossStats>> {
    let mut rng = substream(config.seed, "validation");
    let mut total = LossStats::default();
    let refs: Vec<&Prepared> = data.iter().collect();
    for chunk in refs.chunks(config.batch_size) {
        let (items, _) = corrupt_all(chunk, &config.sampling, model.config().vocab_size, &mut rng)?;
        if items.is_empty() {
            continue;
        }
        let mut tape = Tape::new(model.store());
        if let Some((_, s)) =
            batch_loss::<StreamRng>(model, &mut tape, &items, Reduction::Sum, None)?
        {
            total.sum += s.sum;
            total.positions += s.positions;
        }
    }
    if total.positions == 0 {
        return Ok(None);
    }
    total.mean = total.sum / total.positions as f64;
    Ok(Some(total))
}

fn clip_gradients(model: &mut CopyTransModel, max_norm: f64) {
    let norm = model
        .store()
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in model.store_mut().iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Optimizes `model` on `train`, reporting per-epoch train and validation
/// loss through `on_record` as they are produced. Deterministic given
/// `config.seed` and the model's initial parameters.
pub fn train(
    model: &mut CopyTransModel,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: &TrainConfig,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let mut report = TrainReport::default();
    let max_positions = model.config().max_positions;
    let vocab_size = model.config().vocab_size;
    let train_set = prepare(train, max_positions, &mut report)?;
    let valid_set = prepare(valid, max_positions, &mut report)?;

    let mut data_rng = substream(config.seed, "data");
    let mut corruption_rng = substream(config.seed, "corruption");
    let mut dropout_rng = substream(config.seed, "dropout");
    let mut adam = Adam::new(config.optimizer.clone(), model.store());
    let mut plateau = PlateauHalving::new(config.plateau_epsilon, config.plateau_window);
    let mut base_lr = config.optimizer.lr;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut data_rng);
        let mut epoch_stats = LossStats::default();
        for chunk in order.chunks(config.batch_size) {
            let members: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (items, skipped) =
                corrupt_all(&members, &config.sampling, vocab_size, &mut corruption_rng)?;
            report.skipped_examples += skipped;
            if items.is_empty() {
                continue;
            }
            let grads = {
                let mut tape = Tape::new(model.store());
                let outcome = batch_loss(
                    model,
                    &mut tape,
                    &items,
                    config.reduction,
                    Some(&mut dropout_rng),
                );
                let outcome = match outcome {
                    Err(Error::NumericDomain(_)) => {
                        return Err(Error::Divergence {
                            epoch,
                            step,
                            loss: f64::NAN,
                        })
                    }
                    other => other?,
                };
                let Some((loss, stats)) = outcome else {
                    continue;
                };
                if !stats.sum.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: stats.mean,
                    });
                }
                epoch_stats.sum += stats.sum;
                epoch_stats.positions += stats.positions;
                tape.backward(loss)?
            };
            model.store_mut().zero_grad();
            model.store_mut().accumulate(&grads)?;
            if let Some(c) = config.clip_norm {
                clip_gradients(model, c);
            }
            step += 1;
            let warm = if config.warmup_steps > 0 {
                (step as f64 / config.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            adam.set_lr(base_lr * warm);
            adam.step(model.store_mut())?;
        }
        let lr = adam.config.lr;
        if epoch_stats.positions > 0 {
            epoch_stats.mean = epoch_stats.sum / epoch_stats.positions as f64;
            let record = EpochRecord {
                epoch,
                split: Split::Train,
                loss: epoch_stats.mean,
                loss_sum: epoch_stats.sum,
                positions: epoch_stats.positions,
                lr,
                step,
            };
            on_record(&record);
            report.records.push(record);
        }
        if let Some(v) = evaluate(model, &valid_set, config)? {
            if !v.mean.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: v.mean,
                });
            }
            let record = EpochRecord {
                epoch,
                split: Split::Valid,
                loss: v.mean,
                loss_sum: v.sum,
                positions: v.positions,
                lr,
                step,
            };
            on_record(&record);
            report.records.push(record);
            if plateau.observe(step, v.mean) {
                base_lr *= 0.5;
                report.lr_halvings += 1;
            }
        }
    }
    Ok(report)
}
