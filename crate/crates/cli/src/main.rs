use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use copytrans::data::{
    ingest, synth_generate, write_pairs, CorpusRecord, IngestFormat, SynthConfig,
};
use copytrans::decoding::RerankMethod;
use copytrans::metrics::{self, render_table, rows_to_jsonl};
use copytrans::model::{CopyTransModel, ModelConfig};
use copytrans::pipeline::{
    build_vocabulary, decode_records, summaries_to_jsonl, sweep, train_model, write_sweep_outputs,
    PresetResult, SearchMethod, SweepConfig,
};
use copytrans::tokenizer::Vocabulary;
use copytrans::training::{SamplingConfig, PRESET_NAMES};
use copytrans::{Error, Result};

/// Everything a config file may set. Flags given on the command line win.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    #[serde(flatten)]
    sweep: SweepConfig,
    synth: SynthConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Parser)]
#[command(
    name = "copytrans",
    version,
    about = "Copy-controlled Transformer summarization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paraphrase corpus as train/valid/test pairs files.
    Synth(SynthArgs),
    /// Learn a BPE vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train a model and write a checkpoint plus a per-epoch loss report.
    Train(TrainArgs),
    /// Summarize every source in a corpus.
    Decode(DecodeArgs),
    /// Copy rates and ROUGE for a file of summaries.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one model per sampling preset.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with `seed`, `vocab_size` and `[model]`, `[train]`, `[decode]`, `[synth]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Input format: `pairs` (JSON lines with id, source, summary) or `article`.
    #[arg(long, default_value = "pairs")]
    format: IngestFormat,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    paraphrase_fraction: Option<f64>,
    #[arg(long)]
    train_size: Option<usize>,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    /// Target vocabulary size (default from config, else 1000).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Model dimensions: `desk` or `bert-base` (default: config `[model]`).
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_positions: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, model: &mut ModelConfig) -> Result<()> {
        match self.model.as_deref() {
            None => {}
            Some("desk") => *model = ModelConfig::desk(0),
            Some("bert-base") => *model = ModelConfig::bert_base(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown model preset {other:?} (desk, bert-base)"
                )))
            }
        }
        if let Some(p) = self.max_positions {
            model.max_positions = p;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainingArgs {
    /// Sampling preset `case-a` … `case-h`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    p_seen: Option<f64>,
    #[arg(long)]
    p_unseen: Option<f64>,
    #[arg(long)]
    p_source: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainingArgs {
    fn apply(&self, cfg: &mut SweepConfig) -> Result<()> {
        let t = &mut cfg.train;
        if let Some(p) = &self.preset {
            t.sampling = SamplingConfig::preset(p)?;
        }
        for (flag, slot) in [
            (self.p_seen, &mut t.sampling.p_seen),
            (self.p_unseen, &mut t.sampling.p_unseen),
            (self.p_source, &mut t.sampling.p_source),
        ] {
            if let Some(p) = flag {
                *slot = p;
            }
        }
        t.sampling.validate()?;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if let Some(lr) = self.lr {
            t.optimizer.lr = lr;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out pairs for the per-epoch validation loss.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss records (default: `<out>.train.jsonl`).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Args)]
struct SearchArgs {
    /// `best-first` or `beam`.
    #[arg(long)]
    search: Option<SearchMethod>,
    #[arg(long)]
    k: Option<usize>,
    /// `none`, `length_norm`, `bp_norm` or `sbwr`.
    #[arg(long)]
    rerank: Option<RerankMethod>,
    /// Copy-rate scale for BP-norm.
    #[arg(long)]
    c: Option<f64>,
    /// SBWR reward per word.
    #[arg(long)]
    r: Option<f64>,
    /// Words added to the greedy length for the SBWR target.
    #[arg(long)]
    length_offset: Option<f64>,
    /// Longest summary in tokens, END included.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    no_trigram_blocking: bool,
}

impl SearchArgs {
    fn apply(&self, cfg: &mut SweepConfig) -> Result<()> {
        let d = &mut cfg.decode;
        if let Some(m) = self.search {
            d.method = m;
        }
        if let Some(k) = self.k {
            d.search.k = k;
        }
        if let Some(m) = self.rerank {
            d.rerank.method = m;
        }
        if let Some(c) = self.c {
            d.rerank.c = c;
        }
        if let Some(r) = self.r {
            d.rerank.r_sbwr = r;
        }
        if let Some(o) = self.length_offset {
            d.rerank.length_offset = o;
        }
        if let Some(l) = self.max_len {
            d.search.max_summary_len = l;
        }
        if self.no_trigram_blocking {
            d.search.trigram_blocking = false;
        }
        d.search.validate()?;
        d.rerank.validate()
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Corpus whose sources are summarized.
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    /// Summaries, one per line in input order.
    #[arg(long)]
    out: PathBuf,
    /// Per-summary scores and lengths as JSON lines.
    #[arg(long)]
    details: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// System summaries, one per line.
    #[arg(long)]
    hypotheses: PathBuf,
    /// Reference summaries, one per line.
    #[arg(long, requires = "sources", conflicts_with = "corpus")]
    references: Option<PathBuf>,
    /// Sources, one per line.
    #[arg(long, requires = "references")]
    sources: Option<PathBuf>,
    /// Take references and sources from a pairs corpus instead.
    #[arg(long, required_unless_present = "references")]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    /// Row label in the report.
    #[arg(long, default_value = "system")]
    system: String,
    /// Also write the report row as JSON lines.
    #[arg(long)]
    jsonl: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated presets (default: case-a … case-h).
    #[arg(long, value_delimiter = ',')]
    presets: Option<Vec<String>>,
    #[arg(long, required_unless_present = "synth", requires_all = ["valid", "test"])]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    corpus_args: CorpusArgs,
    /// Generate the synthetic corpus from the `[synth]` config instead of reading files.
    #[arg(long, conflicts_with = "train")]
    synth: bool,
    /// Output directory for summaries, loss reports and the consolidated report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    #[command(flatten)]
    search: SearchArgs,
}

/// Writes through a sibling temporary file so that `path` only ever holds a
/// complete artifact.
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = write(&tmp) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |tmp| {
        std::fs::write(tmp, text).map_err(|e| Error::io(tmp, e))
    })
}

fn read_records(path: &Path, format: IngestFormat) -> Result<Vec<CorpusRecord>> {
    let ingested = ingest(path, format)?;
    if ingested.malformed > 0 {
        eprintln!(
            "{}: skipped {} malformed records",
            path.display(),
            ingested.malformed
        );
    }
    if ingested.records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Ok(ingested.records)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.sweep.seed = seed;
        cfg.synth.seed = seed;
    }
    cfg.sweep.train.seed = cfg.sweep.seed;
    Ok(cfg)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?.synth;
    if let Some(f) = args.paraphrase_fraction {
        cfg.paraphrase_fraction = f;
    }
    if let Some(n) = args.train_size {
        cfg.train_size = n;
    }
    let corpus = synth_generate(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for (name, records) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        let path = args.out.join(format!("{name}.jsonl"));
        write_atomic(&path, |tmp| write_pairs(tmp, records))?;
    }
    eprintln!(
        "wrote {} / {} / {} pairs to {} (unseen summary words {:.3})",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        args.out.display(),
        corpus.realized_unseen_fraction()
    );
    Ok(())
}

fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<()> {
    let cfg = base_config(&args.common)?;
    let records = read_records(&args.corpus, args.corpus_args.format)?;
    let size = args.size.unwrap_or(cfg.sweep.vocab_size);
    let vocab = build_vocabulary(&records, size)?;
    write_atomic(&args.out, |tmp| vocab.save(tmp))?;
    eprintln!(
        "vocabulary of {} tokens written to {}",
        vocab.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?.sweep;
    args.model.apply(&mut cfg.model)?;
    args.training.apply(&mut cfg)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let train_records = read_records(&args.corpus, args.corpus_args.format)?;
    let valid_records = match &args.valid {
        Some(p) => read_records(p, args.corpus_args.format)?,
        None => Vec::new(),
    };
    let (model, report) = train_model(
        &vocab,
        &cfg.model,
        &train_records,
        &valid_records,
        &cfg.train,
        |r| {
            eprintln!(
                "epoch {} {:?} loss {:.4} ({} positions, lr {:.2e})",
                r.epoch, r.split, r.loss, r.positions, r.lr
            )
        },
    )?;
    if report.truncated_examples > 0 {
        eprintln!(
            "truncated {} examples ({} tokens) to fit max_positions",
            report.truncated_examples, report.truncated_tokens
        );
    }
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".train.jsonl");
        PathBuf::from(p)
    });
    write_text(&report_path, &report.to_jsonl())?;
    write_atomic(&args.out, |tmp| model.save(tmp))
}

fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let mut cfg = base_config(&args.common)?.sweep;
    args.search.apply(&mut cfg)?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let model = CopyTransModel::load(&args.checkpoint)?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint expects {} tokens but the vocabulary has {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let records = read_records(&args.input, args.corpus_args.format)?;
    let decoded = decode_records(&model, &vocab, &records, &cfg.decode)?;
    let failed = decoded.iter().filter(|d| d.failed).count();
    if failed > 0 {
        eprintln!(
            "{failed} of {} sources produced no complete summary (written as empty lines)",
            decoded.len()
        );
    }
    if let Some(path) = &args.details {
        write_text(path, &summaries_to_jsonl(&decoded))?;
    }
    let text: String = decoded.iter().map(|d| d.summary.clone() + "\n").collect();
    write_text(&args.out, &text)
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let hyps = read_lines(&args.hypotheses)?;
    let (refs, srcs) = match (&args.references, &args.sources, &args.corpus) {
        (Some(r), Some(s), _) => (read_lines(r)?, read_lines(s)?),
        (_, _, Some(c)) => {
            let records = read_records(c, args.corpus_args.format)?;
            records.into_iter().map(|r| (r.summary, r.source)).unzip()
        }
        _ => {
            return Err(Error::Config(
                "give --references and --sources, or --corpus".into(),
            ))
        }
    };
    let row = metrics::evaluate(&args.system, &hyps, &refs, &srcs)?;
    let rows = [row];
    print!("{}", render_table(&rows));
    if let Some(path) = &args.jsonl {
        write_text(path, &rows_to_jsonl(&rows))?;
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let run = base_config(&args.common)?;
    let mut cfg = run.sweep;
    args.model.apply(&mut cfg.model)?;
    args.training.apply(&mut cfg)?;
    args.search.apply(&mut cfg)?;
    if let Some(v) = args.vocab_size {
        cfg.vocab_size = v;
    }
    let presets: Vec<String> = match &args.presets {
        Some(list) => list
            .iter()
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect(),
        None => PRESET_NAMES.iter().map(|p| p.to_string()).collect(),
    };
    if presets.is_empty() {
        return Err(Error::Config("--presets lists no presets".into()));
    }
    let (train, valid, test) = if args.synth {
        let corpus = synth_generate(&run.synth)?;
        (corpus.train, corpus.valid, corpus.test)
    } else {
        let read = |p: &Option<PathBuf>| {
            read_records(
                p.as_deref().expect("required by clap"),
                args.corpus_args.format,
            )
        };
        (read(&args.train)?, read(&args.valid)?, read(&args.test)?)
    };
    let mut done: Vec<PresetResult> = Vec::new();
    let outcome = sweep(&train, &valid, &test, &presets, &cfg, |r| {
        eprintln!(
            "{}: copy average {} R-2 {:.2}",
            r.preset,
            r.row
                .copy
                .micro
                .average
                .map_or("-".into(), |a| format!("{a:.2}")),
            100.0 * r.row.rouge.rouge2.f1
        );
        done.push(r.clone());
        write_sweep_outputs(&args.out, &done.iter().collect::<Vec<_>>())
    });
    match outcome {
        Ok(results) => {
            let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
            print!("{}", render_table(&rows));
            Ok(())
        }
        Err(e) => {
            if !done.is_empty() {
                eprintln!(
                    "sweep aborted; results for {} presets kept in {}",
                    done.len(),
                    args.out.display()
                );
            }
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // Configuration mistakes share clap's usage-error status.
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
