//! End-to-end orchestration: tokenize a corpus, train one model per sampling
//! preset, decode held-out sources and score the results.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CorpusRecord;
use crate::decoding::{
    beam_search, best_first_search, predict_length, rerank, CandidateFeatures, MaskPrompt,
    RerankConfig, RerankMethod, SearchConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{self, EvaluationRow};
use crate::model::{CopyTransModel, ModelConfig};
use crate::rng::substream;
use crate::tokenizer::Vocabulary;
use crate::training::{
    train, EpochRecord, SamplingConfig, TrainConfig, TrainReport, TrainingExample,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    BestFirst,
    #[default]
    Beam,
}

impl std::str::FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-first" => Ok(SearchMethod::BestFirst),
            "beam" => Ok(SearchMethod::Beam),
            _ => Err(Error::Config(format!(
                "unknown search method {s:?} (best-first, beam)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub method: SearchMethod,
    pub search: SearchConfig,
    pub rerank: RerankConfig,
    /// SBWR target length (words) when greedy decoding produces nothing.
    pub fallback_length: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            method: SearchMethod::Beam,
            search: SearchConfig::default(),
            rerank: RerankConfig::default(),
            fallback_length: 8.0,
        }
    }
}

/// One decoded summary as written to the summaries file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedSummary {
    pub id: String,
    pub summary: String,
    pub score: f64,
    pub reranked_score: Option<f64>,
    /// Unigram copy rate in percent.
    pub copy_rate: Option<f64>,
    /// Tokens including END.
    pub length: usize,
    pub words: usize,
    /// Search produced no complete summary.
    pub failed: bool,
}

pub fn encode_records(
    vocab: &Vocabulary,
    records: &[CorpusRecord],
) -> Result<Vec<TrainingExample>> {
    records
        .iter()
        .map(|r| {
            let ex = TrainingExample {
                source_ids: vocab.encode(&r.source)?,
                summary_ids: vocab.encode(&r.summary)?,
            };
            if ex.source_ids.is_empty() || ex.summary_ids.is_empty() {
                return Err(Error::Data(format!(
                    "record {} encodes to an empty side",
                    r.id
                )));
            }
            Ok(ex)
        })
        .collect()
}

/// Learns a vocabulary from the sources and summaries of `records`.
pub fn build_vocabulary(records: &[CorpusRecord], size: usize) -> Result<Vocabulary> {
    let corpus: Vec<String> = records
        .iter()
        .flat_map(|r| [r.source.clone(), r.summary.clone()])
        .collect();
    Vocabulary::train(&corpus, size)
}

/// Initializes a model from the `init` stream of `seed` and trains it.
pub fn train_model(
    vocab: &Vocabulary,
    model_config: &ModelConfig,
    train_records: &[CorpusRecord],
    valid_records: &[CorpusRecord],
    train_config: &TrainConfig,
    on_record: impl FnMut(&EpochRecord),
) -> Result<(CopyTransModel, TrainReport)> {
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..model_config.clone()
    };
    let mut model = CopyTransModel::new(config, &mut substream(train_config.seed, "init"))?;
    let train_set = encode_records(vocab, train_records)?;
    let valid_set = encode_records(vocab, valid_records)?;
    let report = train(&mut model, &train_set, &valid_set, train_config, on_record)?;
    Ok((model, report))
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Searches, reranks and detokenizes a summary for one source.
pub fn decode_one(
    model: &CopyTransModel,
    vocab: &Vocabulary,
    record: &CorpusRecord,
    config: &DecodeConfig,
) -> Result<DecodedSummary> {
    let source_ids = vocab.encode(&record.source)?;
    // Reserve summary room, but never more than half the positions.
    let reserve = config
        .search
        .max_summary_len
        .min(model.config().max_positions / 2);
    let lm = MaskPrompt::new(model, &source_ids, reserve);
    let outcome = match config.method {
        SearchMethod::BestFirst => best_first_search(&lm, &config.search)?,
        SearchMethod::Beam => beam_search(&lm, &config.search)?,
    };
    let pool = outcome.hypotheses;
    if pool.is_empty() {
        return Ok(DecodedSummary {
            id: record.id.clone(),
            summary: String::new(),
            score: f64::NEG_INFINITY,
            reranked_score: None,
            copy_rate: None,
            length: 0,
            words: 0,
            failed: true,
        });
    }
    let texts = pool
        .iter()
        .map(|h| vocab.decode(h.content()))
        .collect::<Result<Vec<_>>>()?;
    let features: Vec<CandidateFeatures> = texts
        .iter()
        .map(|t| CandidateFeatures {
            words: word_count(t),
            copy_rate: metrics::copy_rate(t, &record.source, 1).map(|r| r / 100.0),
        })
        .collect();
    let l_pred = if config.rerank.method == RerankMethod::Sbwr {
        let count = |ids: &[u32]| vocab.decode(ids).map(|t| word_count(&t)).unwrap_or(0);
        Some(predict_length(
            &lm,
            &config.search,
            config.rerank.length_offset,
            config.fallback_length,
            count,
        )?)
    } else {
        None
    };
    let ranked = rerank(&pool, &features, &config.rerank, l_pred)?;
    let best = ranked.best().expect("non-empty pool");
    let h = &pool[best];
    Ok(DecodedSummary {
        id: record.id.clone(),
        summary: texts[best].clone(),
        score: h.score,
        reranked_score: ranked.scores[best],
        copy_rate: features[best].copy_rate.map(|r| r * 100.0),
        length: h.ids.len(),
        words: features[best].words,
        failed: false,
    })
}

pub fn decode_records(
    model: &CopyTransModel,
    vocab: &Vocabulary,
    records: &[CorpusRecord],
    config: &DecodeConfig,
) -> Result<Vec<DecodedSummary>> {
    config.search.validate()?;
    config.rerank.validate()?;
    records
        .iter()
        .map(|r| decode_one(model, vocab, r, config))
        .collect()
}

pub fn summaries_to_jsonl(summaries: &[DecodedSummary]) -> String {
    summaries
        .iter()
        .map(|s| serde_json::to_string(s).expect("summary serializes") + "\n")
        .collect()
}

/// Scores decoded summaries against the records they came from.
pub fn evaluate_decoded(
    system: &str,
    decoded: &[DecodedSummary],
    records: &[CorpusRecord],
) -> Result<EvaluationRow> {
    let hyps: Vec<String> = decoded.iter().map(|d| d.summary.clone()).collect();
    let refs: Vec<String> = records.iter().map(|r| r.summary.clone()).collect();
    let srcs: Vec<String> = records.iter().map(|r| r.source.clone()).collect();
    metrics::evaluate(system, &hyps, &refs, &srcs)
}

/// Everything shared by the models of one sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            vocab_size: 1000,
            model: ModelConfig::desk(0),
            train: TrainConfig::default(),
            decode: DecodeConfig {
                search: SearchConfig {
                    k: 5,
                    ..SearchConfig::default()
                },
                ..DecodeConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PresetResult {
    pub preset: String,
    pub row: EvaluationRow,
    pub train_report: TrainReport,
    pub summaries: Vec<DecodedSummary>,
}

/// Trains and evaluates one model per preset, all from the same seed. Each
/// finished preset is handed to `on_result` before the next one starts.
pub fn sweep(
    train_records: &[CorpusRecord],
    valid_records: &[CorpusRecord],
    test_records: &[CorpusRecord],
    presets: &[String],
    config: &SweepConfig,
    mut on_result: impl FnMut(&PresetResult) -> Result<()>,
) -> Result<Vec<PresetResult>> {
    if presets.is_empty() {
        return Err(Error::Config("empty preset list".into()));
    }
    let samplings = presets
        .iter()
        .map(|p| SamplingConfig::preset(p))
        .collect::<Result<Vec<_>>>()?;
    let vocab = build_vocabulary(train_records, config.vocab_size)?;
    let mut results = Vec::with_capacity(presets.len());
    for (preset, sampling) in presets.iter().zip(samplings) {
        let train_config = TrainConfig {
            sampling,
            seed: config.seed,
            ..config.train.clone()
        };
        let (model, train_report) = train_model(
            &vocab,
            &config.model,
            train_records,
            valid_records,
            &train_config,
            |_| {},
        )?;
        let summaries = decode_records(&model, &vocab, test_records, &config.decode)?;
        let row = evaluate_decoded(preset, &summaries, test_records)?;
        let result = PresetResult {
            preset: preset.clone(),
            row,
            train_report,
            summaries,
        };
        on_result(&result)?;
        results.push(result);
    }
    Ok(results)
}

/// Writes `<preset>.summaries.jsonl` and `<preset>.train.jsonl` for one
/// preset and rewrites the consolidated `report.txt` / `report.jsonl`.
pub fn write_sweep_outputs(dir: &Path, results: &[&PresetResult]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    for r in results {
        write(
            format!("{}.summaries.jsonl", r.preset),
            summaries_to_jsonl(&r.summaries),
        )?;
        write(
            format!("{}.train.jsonl", r.preset),
            r.train_report.to_jsonl(),
        )?;
    }
    let rows: Vec<EvaluationRow> = results.iter().map(|r| r.row.clone()).collect();
    write("report.txt".into(), metrics::render_table(&rows))?;
    write("report.jsonl".into(), metrics::rows_to_jsonl(&rows))
}
