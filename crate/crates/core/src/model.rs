//! The decoder-only summarizer: source and summary share one Transformer
//! stack, separated only by the attention mask and segment embeddings.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::checkpoint::{load_into, read_params, write_params};
use crate::numerics::{BlockMask, DecayExemptions, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::SpecialIds;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub feed_forward_size: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    /// The desk-scale model; `vocab_size` is filled in from the vocabulary.
    fn default() -> Self {
        ModelConfig::desk(0)
    }
}

impl ModelConfig {
    /// Small CPU-trainable model.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            vocab_size,
            max_positions: 64,
            feed_forward_size: 128,
            dropout: 0.0,
            tie_embeddings: true,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    /// BERT-Base dimensions (12 layers, 768 hidden, 12 heads, 30,522 tokens).
    pub fn bert_base() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            vocab_size: 30_522,
            max_positions: 512,
            feed_forward_size: 3072,
            dropout: 0.1,
            tie_embeddings: true,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_size == 0
            || self.num_heads == 0
            || !self.hidden_size.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size <= SpecialIds::COUNT as usize {
            return fail(format!(
                "vocab_size {} leaves no room for ordinary tokens",
                self.vocab_size
            ));
        }
        if self.max_positions < 4 || self.feed_forward_size == 0 {
            return fail("max_positions must be at least 4 and feed_forward_size positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Segment label of a position in a [`JointSequence`].
pub const SOURCE_SEGMENT: u32 = 0;
pub const SUMMARY_SEGMENT: u32 = 1;

/// The concatenation `[START, source..., END, summary...]` consumed by the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointSequence {
    pub ids: Vec<u32>,
    /// Length of the source side including its START and END.
    pub source_len: usize,
    pub position_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
}

impl JointSequence {
    pub fn new(ids: Vec<u32>, source_len: usize) -> Result<Self> {
        contract!(
            source_len >= 2 && source_len <= ids.len(),
            "source_len {source_len} invalid for {} ids",
            ids.len()
        );
        let specials = SpecialIds::RESERVED;
        contract!(ids[0] == specials.start, "sequence must open with START");
        contract!(
            ids[source_len - 1] == specials.end,
            "source side must close with END"
        );
        let position_ids = (0..ids.len() as u32).collect();
        let segment_ids = (0..ids.len())
            .map(|i| {
                if i < source_len {
                    SOURCE_SEGMENT
                } else {
                    SUMMARY_SEGMENT
                }
            })
            .collect();
        Ok(JointSequence {
            ids,
            source_len,
            position_ids,
            segment_ids,
        })
    }

    fn wrap(source: &[u32], tail: impl IntoIterator<Item = u32>) -> Result<Self> {
        let specials = SpecialIds::RESERVED;
        let mut ids = Vec::with_capacity(source.len() + 8);
        ids.push(specials.start);
        ids.extend_from_slice(source);
        ids.push(specials.end);
        let source_len = ids.len();
        ids.extend(tail);
        JointSequence::new(ids, source_len)
    }

    /// `[START, x, END, y, END]` for a complete training target.
    pub fn with_target(source: &[u32], summary: &[u32]) -> Result<Self> {
        contract!(!summary.is_empty(), "summary must not be empty");
        Self::wrap(
            source,
            summary.iter().copied().chain([SpecialIds::RESERVED.end]),
        )
    }

    /// `[START, x, END, y_<j, MASK]` used to predict the next summary token.
    pub fn prompt(source: &[u32], partial: &[u32]) -> Result<Self> {
        Self::wrap(
            source,
            partial.iter().copied().chain([SpecialIds::RESERVED.mask]),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn summary_ids(&self) -> &[u32] {
        &self.ids[self.source_len..]
    }

    /// Same layout with different token ids (used for corrupted copies).
    pub fn with_ids(&self, ids: Vec<u32>) -> Result<Self> {
        contract!(
            ids.len() == self.ids.len(),
            "replacement ids have a different length"
        );
        Ok(JointSequence {
            ids,
            ..self.clone()
        })
    }

    pub fn attention_mask(&self) -> Result<AttentionMask> {
        build_attention_mask(self.source_len, self.len())
    }
}

/// Binary self-attention mask; row `i` lists which keys query `i` may read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    source_len: usize,
    cells: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Cell `(i, j)`, zero-indexed.
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.size + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        self.cells.chunks(self.size)
    }

    pub(crate) fn to_block(&self, offset: usize) -> BlockMask {
        BlockMask {
            offset,
            len: self.size,
            allowed: self.cells.clone(),
        }
    }
}

/// Source positions see the whole source; a summary position sees everything
/// up to and including itself. With one-based `i, j`: `M[i][j] = j <= max(i, |x|)`.
pub fn build_attention_mask(source_len: usize, total_len: usize) -> Result<AttentionMask> {
    contract!(source_len > 0, "source_len must be positive");
    contract!(
        source_len <= total_len,
        "source_len {source_len} exceeds total length {total_len}"
    );
    let cells = (0..total_len)
        // 0-based form of "column j+1 visible iff j+1 <= max(i+1, |x|)".
        .flat_map(|i| (0..total_len).map(move |j| j < (i + 1).max(source_len)))
        .collect();
    Ok(AttentionMask {
        size: total_len,
        source_len,
        cells,
    })
}

/// Several joint sequences concatenated row-wise for one forward pass.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    pub ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub offsets: Vec<usize>,
    blocks: Vec<BlockMask>,
}

impl PackedBatch {
    pub fn new(seqs: &[JointSequence]) -> Result<Self> {
        let masks = seqs
            .iter()
            .map(JointSequence::attention_mask)
            .collect::<Result<Vec<_>>>()?;
        Self::with_masks(seqs, &masks)
    }

    pub fn with_masks(seqs: &[JointSequence], masks: &[AttentionMask]) -> Result<Self> {
        contract!(
            seqs.len() == masks.len(),
            "{} sequences but {} masks",
            seqs.len(),
            masks.len()
        );
        let mut batch = PackedBatch {
            ids: Vec::new(),
            position_ids: Vec::new(),
            segment_ids: Vec::new(),
            offsets: Vec::with_capacity(seqs.len()),
            blocks: Vec::with_capacity(seqs.len()),
        };
        for (seq, mask) in seqs.iter().zip(masks) {
            contract!(
                mask.size() == seq.len(),
                "mask of size {} for a sequence of {}",
                mask.size(),
                seq.len()
            );
            let offset = batch.ids.len();
            batch.offsets.push(offset);
            batch.ids.extend_from_slice(&seq.ids);
            batch.position_ids.extend_from_slice(&seq.position_ids);
            batch.segment_ids.extend_from_slice(&seq.segment_ids);
            batch.blocks.push(mask.to_block(offset));
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    attn_out: (ParamId, ParamId),
    attn_norm: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Params {
    token: ParamId,
    position: ParamId,
    segment: ParamId,
    embed_norm: (ParamId, ParamId),
    layers: Vec<LayerParams>,
    /// Separate output projection, present only when embeddings are untied.
    output: Option<ParamId>,
}

/// Decoder-only Transformer with token, position and segment embeddings and a
/// softmax output that reuses the token embedding matrix.
#[derive(Clone, Debug)]
pub struct CopyTransModel {
    config: ModelConfig,
    store: ParamStore,
    params: Params,
}

impl CopyTransModel {
    pub fn new<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_size;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut store = ParamStore::new(DecayExemptions::default());
        let mut weight = |store: &mut ParamStore, name: String, shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            store.add(
                name,
                Tensor::new(shape.to_vec(), data).expect("shape matches"),
            )
        };
        let token = weight(
            &mut store,
            "embeddings.token".into(),
            &[config.vocab_size, d],
        );
        let position = weight(
            &mut store,
            "embeddings.position".into(),
            &[config.max_positions, d],
        );
        let segment = weight(&mut store, "embeddings.segment".into(), &[2, d]);
        let norm = |store: &mut ParamStore, prefix: &str| {
            (
                store.add(format!("{prefix}.norm.gamma"), Tensor::filled(&[d], 1.0)),
                store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[d])),
            )
        };
        let embed_norm = norm(&mut store, "embeddings");
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
                let w = weight(store, format!("layer{l}.{name}.weight"), &[fan_in, fan_out]);
                let b = store.add(format!("layer{l}.{name}.bias"), Tensor::zeros(&[fan_out]));
                (w, b)
            };
            let query = linear(&mut store, "attention.query", d, d);
            let key = linear(&mut store, "attention.key", d, d);
            let value = linear(&mut store, "attention.value", d, d);
            let attn_out = linear(&mut store, "attention.output", d, d);
            let ffn_in = linear(&mut store, "ffn.in", d, config.feed_forward_size);
            let ffn_out = linear(&mut store, "ffn.out", config.feed_forward_size, d);
            let attn_norm = norm(&mut store, &format!("layer{l}.attention"));
            let ffn_norm = norm(&mut store, &format!("layer{l}.ffn"));
            layers.push(LayerParams {
                query,
                key,
                value,
                attn_out,
                attn_norm,
                ffn_in,
                ffn_out,
                ffn_norm,
            });
        }
        let output = (!config.tie_embeddings)
            .then(|| weight(&mut store, "output.weight".into(), &[config.vocab_size, d]));
        let params = Params {
            token,
            position,
            segment,
            embed_norm,
            layers,
            output,
        };
        Ok(CopyTransModel {
            config,
            store,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// The token embedding matrix (also the output projection when tied).
    pub fn token_embedding(&self) -> ParamId {
        self.params.token
    }

    /// The matrix used by [`predict_logits`](Self::predict_logits).
    pub fn output_projection(&self) -> ParamId {
        self.params.output.unwrap_or(self.params.token)
    }

    /// Row `i` is `W_e[id_i] + W_p[i] + W_s[segment_i]`.
    pub fn embed(&self, tape: &mut Tape, batch: &PackedBatch) -> Result<Var> {
        if let Some(&p) = batch.position_ids.iter().max() {
            contract!(
                (p as usize) < self.config.max_positions,
                "position {p} exceeds max_positions {}",
                self.config.max_positions
            );
        }
        let token = tape.param(self.params.token);
        let position = tape.param(self.params.position);
        let segment = tape.param(self.params.segment);
        let t = tape.embedding(token, &batch.ids)?;
        let p = tape.embedding(position, &batch.position_ids)?;
        let s = tape.embedding(segment, &batch.segment_ids)?;
        let tp = tape.add(t, p)?;
        tape.add(tp, s)
    }

    fn linear(&self, tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let y = tape.matmul(x, wv)?;
        tape.add_bias(y, bv)
    }

    fn norm(&self, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let gv = tape.param(g);
        let bv = tape.param(b);
        tape.layer_norm(x, gv, bv, self.config.layer_norm_eps)
    }

    /// Contextual states `h`, one row per packed token. Pass an RNG to enable dropout.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        batch: &PackedBatch,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let mut drop = |tape: &mut Tape, x: Var| match rng.as_deref_mut() {
            Some(r) => tape.dropout(x, p, r),
            None => x,
        };
        let e = self.embed(tape, batch)?;
        let e = self.norm(tape, e, self.params.embed_norm)?;
        let mut h = drop(tape, e);
        for layer in &self.params.layers {
            let q = self.linear(tape, h, layer.query)?;
            let k = self.linear(tape, h, layer.key)?;
            let v = self.linear(tape, h, layer.value)?;
            let a = tape.attention(q, k, v, self.config.num_heads, &batch.blocks)?;
            let a = self.linear(tape, a, layer.attn_out)?;
            let a = drop(tape, a);
            let res = tape.add(h, a)?;
            h = self.norm(tape, res, layer.attn_norm)?;

            let f = self.linear(tape, h, layer.ffn_in)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, layer.ffn_out)?;
            let f = drop(tape, f);
            let res = tape.add(h, f)?;
            h = self.norm(tape, res, layer.ffn_norm)?;
        }
        Ok(h)
    }

    /// Vocabulary logits `W_e^T h_i` for each row of `states`.
    pub fn predict_logits(&self, tape: &mut Tape, states: Var) -> Result<Var> {
        let w = tape.param(self.output_projection());
        tape.matmul_nt(states, w)
    }

    /// Writes a JSON header line with the config, then the parameter container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: self.config.clone(),
        };
        let line = serde_json::to_string(&header).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        write_params(&mut w, &self.store)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported schema version {}", header.schema_version),
            ));
        }
        let entries = read_params(&mut r).map_err(|e| Error::format(path, e.to_string()))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = CopyTransModel::new(header.config, &mut rng)?;
        load_into(&mut model.store, entries).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config: ModelConfig,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    type NoRng = ChaCha8Rng;

    fn tiny(vocab: usize, tie: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            vocab_size: vocab,
            max_positions: 16,
            feed_forward_size: 12,
            dropout: 0.0,
            tie_embeddings: tie,
            init_std: 0.5,
            layer_norm_eps: 1e-12,
        }
    }

    fn model(seed: u64, tie: bool) -> CopyTransModel {
        CopyTransModel::new(tiny(12, tie), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn states(m: &CopyTransModel, seq: &JointSequence) -> Tensor {
        let batch = PackedBatch::new(std::slice::from_ref(seq)).unwrap();
        let mut tape = Tape::new(m.store());
        let h = m.forward::<NoRng>(&mut tape, &batch, None).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn mask_for_three_source_five_total() {
        let m = build_attention_mask(3, 5).unwrap();
        let want = [
            [1, 1, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 1, 1, 0],
            [1, 1, 1, 1, 1],
        ];
        for (i, row) in want.iter().enumerate() {
            for (j, &cell) in row.iter().enumerate() {
                assert_eq!(m.get(i, j), cell == 1, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn mask_without_summary_is_all_ones_and_rows_grow() {
        let m = build_attention_mask(4, 4).unwrap();
        assert!(m.rows().all(|r| r.iter().all(|&c| c)));
        let m = build_attention_mask(2, 7).unwrap();
        for i in 2..7 {
            for j in 0..7 {
                assert!(!m.get(i - 1, j) || m.get(i, j));
            }
        }
        assert!(build_attention_mask(5, 3).is_err());
        assert!(build_attention_mask(0, 3).is_err());
    }

    #[test]
    fn joint_sequence_layout() {
        let seq = JointSequence::with_target(&[7, 8, 9], &[8, 10]).unwrap();
        assert_eq!(seq.ids, vec![0, 7, 8, 9, 1, 8, 10, 1]);
        assert_eq!(seq.source_len, 5);
        assert_eq!(seq.position_ids, (0..8).collect::<Vec<_>>());
        assert_eq!(seq.segment_ids, vec![0, 0, 0, 0, 0, 1, 1, 1]);
        assert!(JointSequence::with_target(&[7], &[]).is_err());
        let prompt = JointSequence::prompt(&[7], &[]).unwrap();
        assert_eq!(prompt.ids, vec![0, 7, 1, 2]);
        assert_eq!(prompt.segment_ids, vec![0, 0, 0, 1]);
    }

    #[test]
    fn embed_sums_the_three_tables() {
        let mut m = model(1, true);
        let seq = JointSequence::with_target(&[5, 5], &[6]).unwrap();
        let batch = PackedBatch::new(std::slice::from_ref(&seq)).unwrap();
        let e = {
            let mut tape = Tape::new(m.store());
            let e = m.embed(&mut tape, &batch).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(e.shape(), &[seq.len(), 8]);
        let s = m.store();
        let (tok, pos, seg) = (
            s.value(m.params.token),
            s.value(m.params.position),
            s.value(m.params.segment),
        );
        for i in 0..seq.len() {
            for c in 0..8 {
                let want = tok.row(seq.ids[i] as usize)[c]
                    + pos.row(i)[c]
                    + seg.row(seq.segment_ids[i] as usize)[c];
                assert_eq!(e.row(i)[c], want);
            }
        }
        // identical tokens at positions 1 and 2 differ by the position rows only
        for c in 0..8 {
            let diff = e.row(2)[c] - e.row(1)[c];
            assert!((diff - (pos.row(2)[c] - pos.row(1)[c])).abs() < 1e-15);
        }

        let (p, sg) = (m.params.position, m.params.segment);
        m.store_mut().get_mut(p).value.fill(0.0);
        m.store_mut().get_mut(sg).value.fill(0.0);
        let mut tape = Tape::new(m.store());
        let e = m.embed(&mut tape, &batch).unwrap();
        let tok = m.store().value(m.params.token);
        for i in 0..seq.len() {
            assert_eq!(tape.value(e).row(i), tok.row(seq.ids[i] as usize));
        }
    }

    #[test]
    fn embed_rejects_position_overflow() {
        let m = model(1, true);
        let seq = JointSequence::with_target(&[5; 10], &[6; 10]).unwrap();
        let batch = PackedBatch::new(std::slice::from_ref(&seq)).unwrap();
        let mut tape = Tape::new(m.store());
        assert!(matches!(
            m.embed(&mut tape, &batch),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn future_summary_tokens_do_not_leak() {
        let m = model(3, true);
        let a = JointSequence::with_target(&[4, 5, 6], &[7, 8, 9]).unwrap();
        let mut b = a.clone();
        b.ids[6] = 11; // summary position 6; positions 0..=5 must be untouched
        let (ha, hb) = (states(&m, &a), states(&m, &b));
        for i in 0..6 {
            assert_eq!(ha.row(i), hb.row(i), "row {i}");
        }
        assert_ne!(ha.row(6), hb.row(6));
    }

    #[test]
    fn source_perturbation_reaches_every_position() {
        let m = model(4, true);
        let a = JointSequence::with_target(&[4, 5, 6], &[7, 8]).unwrap();
        let mut b = a.clone();
        b.ids[2] = 10;
        let (ha, hb) = (states(&m, &a), states(&m, &b));
        for i in 0..a.len() {
            assert_ne!(ha.row(i), hb.row(i), "row {i}");
        }
    }

    #[test]
    fn single_token_forward_is_finite() {
        let m = model(5, true);
        let seq = JointSequence::new(vec![0, 1], 2).unwrap();
        assert!(states(&m, &seq).is_finite());
    }

    #[test]
    fn zero_state_gives_uniform_logits() {
        let m = model(6, true);
        let mut tape = Tape::new(m.store());
        let h = tape.leaf(Tensor::zeros(&[1, 8]));
        let logits = m.predict_logits(&mut tape, h).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 12]);
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tying_removes_one_embedding_matrix() {
        let tied = model(7, true);
        let untied = model(7, false);
        assert_eq!(tied.num_parameters(), untied.num_parameters() - 12 * 8);
        assert_eq!(tied.output_projection(), tied.token_embedding());
    }

    #[test]
    fn tied_embedding_receives_output_side_gradient() {
        // Token 11 never appears in the input, so only the output role can
        // give its embedding row a gradient.
        let seq = JointSequence::with_target(&[4, 5], &[6]).unwrap();
        let batch = PackedBatch::new(std::slice::from_ref(&seq)).unwrap();
        let grad_row = |m: &CopyTransModel| {
            let mut tape = Tape::new(m.store());
            let h = m.forward::<NoRng>(&mut tape, &batch, None).unwrap();
            let rows = tape.gather_rows(h, &[4]).unwrap();
            let logits = m.predict_logits(&mut tape, rows).unwrap();
            let loss = tape
                .cross_entropy(logits, &[6], crate::numerics::Reduction::Mean)
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            grads.get(m.token_embedding()).unwrap().row(11).to_vec()
        };
        assert!(grad_row(&model(8, true)).iter().any(|&g| g != 0.0));
        assert!(grad_row(&model(8, false)).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(9, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let loaded = CopyTransModel::load(&path).unwrap();
        assert_eq!(loaded.config(), m.config());
        for (a, b) in loaded.store().iter().zip(m.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.decay_exempt, b.decay_exempt);
        }
    }

    #[test]
    fn decay_exemptions_cover_bias_and_norm_only() {
        let m = model(10, true);
        for p in m.store().iter() {
            let expected = p.name.ends_with(".bias") || p.name.contains(".norm.");
            assert_eq!(p.decay_exempt, expected, "{}", p.name);
        }
    }
}
