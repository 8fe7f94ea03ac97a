//! Corpus ingestion and a synthetic corpus whose summaries paraphrase a
//! controllable share of their words through a fixed substitution table.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tokenizer::normalize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub source: String,
    pub summary: String,
    /// Share of summary words absent from the source, for generated records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_fraction: Option<f64>,
}

impl CorpusRecord {
    pub fn new(id: impl Into<String>, source: &str, summary: &str) -> Result<Self> {
        let (source, summary) = (normalize(source), normalize(summary));
        if source.is_empty() || summary.is_empty() {
            return Err(Error::Data("source and summary must be non-empty".into()));
        }
        Ok(CorpusRecord {
            id: id.into(),
            source,
            summary,
            unseen_fraction: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    /// One JSON object per line with `id`, `source`, `summary`.
    Pairs,
    /// Blank-line separated blocks: a title line, then the article body.
    Article,
}

impl std::str::FromStr for IngestFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(IngestFormat::Pairs),
            "article" => Ok(IngestFormat::Article),
            _ => Err(Error::Config(format!(
                "unknown corpus format {s:?} (pairs, article)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<CorpusRecord>,
    pub malformed: usize,
}

/// Largest tolerated share of malformed entries.
pub const MAX_MALFORMED: f64 = 0.10;

pub fn ingest(path: &Path, format: IngestFormat) -> Result<Ingested> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text, format).map_err(|e| match e {
        Error::Data(m) => Error::format(path, m),
        other => other,
    })
}

pub fn ingest_str(text: &str, format: IngestFormat) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut entries = 0usize;
    match format {
        IngestFormat::Pairs => {
            #[derive(Deserialize)]
            struct Line {
                id: Option<serde_json::Value>,
                source: String,
                summary: String,
            }
            for (i, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                entries += 1;
                let parsed = serde_json::from_str::<Line>(line).ok().and_then(|l| {
                    let id = match l.id {
                        Some(serde_json::Value::String(s)) => s,
                        Some(v) => v.to_string(),
                        None => format!("line-{}", i + 1),
                    };
                    CorpusRecord::new(id, &l.source, &l.summary).ok()
                });
                match parsed {
                    Some(r) => out.records.push(r),
                    None => out.malformed += 1,
                }
            }
        }
        IngestFormat::Article => {
            for (i, block) in blocks(text).into_iter().enumerate() {
                entries += 1;
                let mut lines = block.iter();
                let title = lines.next().copied().unwrap_or("");
                let body = lines.copied().collect::<Vec<_>>().join(" ");
                match CorpusRecord::new(format!("article-{}", i + 1), first_sentence(&body), title)
                {
                    Ok(r) => out.records.push(r),
                    Err(_) => out.malformed += 1,
                }
            }
        }
    }
    if entries == 0 {
        return Err(Error::Data("corpus is empty".into()));
    }
    if out.malformed as f64 > MAX_MALFORMED * entries as f64 {
        return Err(Error::Data(format!(
            "{} of {entries} entries are malformed (more than {:.0}%)",
            out.malformed,
            MAX_MALFORMED * 100.0
        )));
    }
    Ok(out)
}

fn blocks(text: &str) -> Vec<Vec<&str>> {
    let mut out = vec![];
    let mut cur = vec![];
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.trim());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "st", "jr", "sr", "vs", "etc", "inc", "ltd", "co", "corp",
    "gen", "gov", "sen", "rep", "lt", "col", "sgt", "no", "jan", "feb", "mar", "apr", "jun", "jul",
    "aug", "sep", "sept", "oct", "nov", "dec",
];

/// Text up to the first sentence-final `.`, `!` or `?` that is followed by
/// whitespace and is not part of an abbreviation or initial.
pub fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if !matches!(b, b'.' | b'!' | b'?') {
            continue;
        }
        let at_end = i + 1 == bytes.len();
        if !at_end && !bytes[i + 1].is_ascii_whitespace() {
            continue;
        }
        if b == b'.' && !at_end {
            let word = text[..i]
                .rsplit(|c: char| c.is_whitespace())
                .next()
                .unwrap_or("");
            let bare = word.trim_start_matches(|c: char| !c.is_alphanumeric());
            let lower = bare.to_lowercase();
            let initial = bare.chars().count() == 1 && bare.chars().all(char::is_uppercase);
            let dotted = bare.contains('.');
            if initial || dotted || ABBREVIATIONS.contains(&lower.as_str()) {
                continue;
            }
        }
        return &text[..=i];
    }
    text
}

/// Synthetic corpus parameters. Sources are sequences of distinct pseudo-words;
/// each summary is the source's leading span with some words swapped for their
/// dedicated paraphrase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Content words; the paraphrase lexicon has the same size.
    pub vocab_size: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Inclusive word-count ranges.
    pub source_len: (usize, usize),
    pub summary_len: (usize, usize),
    /// Expected share of summary words replaced by paraphrases.
    pub paraphrase_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 120,
            train_size: 2000,
            valid_size: 200,
            test_size: 200,
            source_len: (8, 8),
            summary_len: (4, 4),
            paraphrase_fraction: 0.33,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.paraphrase_fraction) {
            return fail(format!(
                "paraphrase_fraction {} outside [0, 1]",
                self.paraphrase_fraction
            ));
        }
        let ((xl, xh), (yl, yh)) = (self.source_len, self.summary_len);
        if xl == 0 || yl == 0 || xl > xh || yl > yh {
            return fail("length ranges must be non-empty and positive".into());
        }
        if yh > xl {
            return fail(format!(
                "summaries of up to {yh} words cannot fit sources of {xl} words"
            ));
        }
        if self.vocab_size < xh {
            return fail(format!(
                "vocab_size {} is smaller than the longest source",
                self.vocab_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub train: Vec<CorpusRecord>,
    pub valid: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
    /// Content word `i` is replaced by `paraphrases[i]` with probability `rates[i]`.
    pub content: Vec<String>,
    pub paraphrases: Vec<String>,
    pub rates: Vec<f64>,
}

impl SynthCorpus {
    /// Unseen-word share over every summary word of every split.
    pub fn realized_unseen_fraction(&self) -> f64 {
        let (mut unseen, mut total) = (0.0, 0usize);
        for r in self.train.iter().chain(&self.valid).chain(&self.test) {
            let n = r.summary.split_whitespace().count();
            unseen += r.unseen_fraction.unwrap_or(0.0) * n as f64;
            total += n;
        }
        unseen / total.max(1) as f64
    }
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS[rng.random_range(0..ONSETS.len())],
                VOWELS[rng.random_range(0..VOWELS.len())]
            )
        })
        .collect()
}

/// Per-word replacement rates whose mean is `f`: below 0.65 a share `f / 0.65`
/// of the words gets rates spread evenly over [0.3, 1.0], the rest none;
/// above, every word gets rates spread over [2f − 1, 1].
fn replacement_rates<R: Rng>(n: usize, f: f64, rng: &mut R) -> Vec<f64> {
    let (count, lo) = if f < 0.65 {
        (((f / 0.65) * n as f64).round() as usize, 0.3)
    } else {
        (n, 2.0 * f - 1.0)
    };
    let mut rates: Vec<f64> = (0..n)
        .map(|i| {
            if i < count {
                lo + (1.0 - lo) * (i as f64 + 0.5) / count as f64
            } else {
                0.0
            }
        })
        .collect();
    rates.shuffle(rng);
    rates
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = substream(config.seed, "synth");
    let n = config.vocab_size;
    let mut seen = HashSet::new();
    let mut lexicon = |syllables: usize, rng: &mut crate::rng::StreamRng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = pseudo_word(rng, syllables);
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    };
    let content = lexicon(2, &mut rng);
    let paraphrases = lexicon(3, &mut rng);
    let rates = replacement_rates(n, config.paraphrase_fraction, &mut rng);
    let indices: Vec<usize> = (0..n).collect();
    let mut split = |name: &str, size: usize| -> Vec<CorpusRecord> {
        (0..size)
            .map(|i| {
                let lx = rng.random_range(config.source_len.0..=config.source_len.1);
                let ly = rng.random_range(config.summary_len.0..=config.summary_len.1);
                let words: Vec<usize> = indices.choose_multiple(&mut rng, lx).copied().collect();
                let mut replaced = 0;
                let summary: Vec<&str> = words[..ly]
                    .iter()
                    .map(|&w| {
                        if rng.random::<f64>() < rates[w] {
                            replaced += 1;
                            paraphrases[w].as_str()
                        } else {
                            content[w].as_str()
                        }
                    })
                    .collect();
                let source: Vec<&str> = words.iter().map(|&w| content[w].as_str()).collect();
                CorpusRecord {
                    id: format!("{name}-{:05}", i + 1),
                    source: source.join(" "),
                    summary: summary.join(" "),
                    unseen_fraction: Some(replaced as f64 / ly as f64),
                }
            })
            .collect()
    };
    let train = split("train", config.train_size);
    let valid = split("valid", config.valid_size);
    let test = split("test", config.test_size);
    Ok(SynthCorpus {
        train,
        valid,
        test,
        content,
        paraphrases,
        rates,
    })
}

pub fn write_pairs(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
