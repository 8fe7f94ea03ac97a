//! Acceptance checks: one PASS/FAIL line per criterion. Run with
//! `cargo test -p copytrans --test acceptance`; set `ACCEPTANCE_STRICT=1`
//! to exit non-zero when any criterion fails.

use std::cmp::Ordering;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use copytrans::data::{synth_generate, SynthConfig};
use copytrans::decoding::{
    beam_search, best_first_search, brevity_penalty, has_repeated_trigram, length_norm, rerank,
    CandidateFeatures, Hypothesis, NextTokenModel, RerankConfig, RerankMethod, SearchConfig,
};
use copytrans::metrics::{copy_rate, rouge_l, rouge_n, words};
use copytrans::model::{
    build_attention_mask, CopyTransModel, JointSequence, ModelConfig, PackedBatch,
};
use copytrans::numerics::gradcheck::check_gradients;
use copytrans::numerics::{log_softmax, Reduction, Tape, Tensor};
use copytrans::pipeline::{sweep, write_sweep_outputs, PresetResult, SweepConfig};
use copytrans::training::{
    batch_loss, categorize_tokens, sample_and_corrupt, CorruptedExample, Corruption,
    SamplingConfig, TokenCategory, PRESET_NAMES,
};

type NoRng = ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_model(
    seed: u64,
    hidden: usize,
    layers: usize,
    tie: bool,
    init_std: f64,
) -> CopyTransModel {
    let cfg = ModelConfig {
        num_layers: layers,
        hidden_size: hidden,
        num_heads: 2,
        vocab_size: 12,
        max_positions: 16,
        feed_forward_size: 2 * hidden,
        dropout: 0.0,
        tie_embeddings: tie,
        init_std,
        layer_norm_eps: 1e-12,
    };
    CopyTransModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid config")
}

fn mask_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cells = 0usize;
    for _ in 0..100 {
        let x = rng.random_range(1..=40usize);
        let z = rng.random_range(0..=40usize);
        let total = x + z;
        let m = build_attention_mask(x, total).expect("mask");
        // 1-based: row i may read column j iff j <= max(i, |x|).
        for i in 1..=total {
            for j in 1..=total {
                cells += 1;
                if m.get(i - 1, j - 1) != (j <= i.max(x)) {
                    return outcome(false, format!("|x|={x} |z|={z} cell ({i},{j})"));
                }
            }
        }
    }
    outcome(true, format!("100 pairs, {cells} cells, 0 mismatches"))
}

fn logits_and_states(m: &CopyTransModel, seq: &JointSequence) -> (Tensor, Tensor) {
    let batch = PackedBatch::new(std::slice::from_ref(seq)).expect("batch");
    let mut tape = Tape::new(m.store());
    let h = m
        .forward::<NoRng>(&mut tape, &batch, None)
        .expect("forward");
    let logits = m.predict_logits(&mut tape, h).expect("logits");
    (tape.value(logits).clone(), tape.value(h).clone())
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for seed in 0..20 {
        let m = small_model(seed, 16, 2, seed % 2 == 0, 0.3);
        let x = rng.random_range(1..=5usize);
        let z = rng.random_range(1..=6usize);
        let source: Vec<u32> = (0..x).map(|_| rng.random_range(4..12)).collect();
        let summary: Vec<u32> = (0..z).map(|_| rng.random_range(4..12)).collect();
        let base = JointSequence::with_target(&source, &summary).expect("seq");
        let (la, ha) = logits_and_states(&m, &base);
        // Summary tokens occupy positions source_len .. len-1 (the final END included).
        for j in base.source_len..base.len() {
            let mut ids = base.ids.clone();
            ids[j] = if ids[j] == 5 { 6 } else { 5 };
            let (lb, hb) = logits_and_states(&m, &base.with_ids(ids).expect("seq"));
            for i in 0..j {
                for (a, b) in la
                    .row(i)
                    .iter()
                    .zip(lb.row(i))
                    .chain(ha.row(i).iter().zip(hb.row(i)))
                {
                    worst = worst.max((a - b).abs());
                }
            }
            trials += 1;
        }
    }
    outcome(
        worst < 1e-10,
        format!("{trials} perturbations, max deviation {worst:.3e} (< 1e-10)"),
    )
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut checked = 0;
    for (seed, tie) in [(21, true), (22, false)] {
        let mut m = small_model(seed, 16, 2, tie, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sampling = SamplingConfig::new(0.6, 0.6, 0.3).expect("rates");
        let items: Vec<CorruptedExample> = [
            (&[4u32, 5, 6, 7][..], &[5u32, 9][..]),
            (&[8, 9, 10], &[11, 8, 4]),
        ]
        .iter()
        .map(|(x, z)| {
            let seq = JointSequence::with_target(x, z).expect("seq");
            let cats = categorize_tokens(&seq);
            loop {
                let (seq, record) =
                    sample_and_corrupt(&seq, &cats, &sampling, 12, &mut rng).expect("corrupt");
                if !record.is_empty() {
                    break CorruptedExample { seq, record };
                }
            }
        })
        .collect();
        let shadow = m.clone();
        let loss_of = |store: &copytrans::numerics::ParamStore| {
            let mut tape = Tape::new(store);
            let (loss, _) = batch_loss::<NoRng>(&shadow, &mut tape, &items, Reduction::Mean, None)?
                .expect("positions");
            tape.value(loss).item()
        };
        let grads = {
            let mut tape = Tape::new(m.store());
            let (loss, _) = batch_loss::<NoRng>(&m, &mut tape, &items, Reduction::Mean, None)
                .unwrap()
                .unwrap();
            tape.backward(loss).unwrap()
        };
        let report =
            check_gradients(m.store_mut(), &grads, 1e-5, None, loss_of).expect("gradcheck");
        checked += report.checked;
        if report.max_relative_error() >= worst {
            worst = report.max_relative_error();
            if let Some((name, i, _)) = &report.worst {
                detail = format!("{name}[{i}]");
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("{checked} scalars, max relative error {worst:.3e} at {detail} (< 1e-4)"),
    )
}

/// Next-token distribution is a fixed pseudo-random function of the prefix.
struct ToyLm {
    vocab: usize,
    seed: u64,
}

impl NextTokenModel for ToyLm {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefixes: &[&[u32]]) -> copytrans::Result<Vec<Vec<f64>>> {
        prefixes
            .iter()
            .map(|p| {
                let key = p.iter().fold(self.seed, |h, &t| {
                    h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1)
                });
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let logits: Vec<f64> = (0..self.vocab).map(|_| 4.0 * rng.random::<f64>()).collect();
                log_softmax(&logits)
            })
            .collect()
    }
}

/// Enumerates every END-terminated sequence of at most `max_len` tokens.
fn brute_force(lm: &ToyLm, max_len: usize) -> (Vec<u32>, f64) {
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((ids, score)) = stack.pop() {
        let lp = lm.next_log_probs(&[&ids]).unwrap().remove(0);
        for t in 0..lm.vocab as u32 {
            let mut next: Vec<u32> = ids.clone();
            next.push(t);
            let s = score + lp[t as usize];
            if t == 0 {
                let better = match &best {
                    None => true,
                    Some((b, bs)) => {
                        s.total_cmp(bs)
                            .then_with(|| b.len().cmp(&next.len()))
                            .then_with(|| b.cmp(&next))
                            == Ordering::Greater
                    }
                };
                if better {
                    best = Some((next, s));
                }
            } else if next.len() < max_len {
                stack.push((next, s));
            }
        }
    }
    best.expect("END is always reachable")
}

fn search_oracle() -> Outcome {
    let (mut bf_miss, mut beam_miss, mut wide_miss, mut n) = (0, 0, 0, 0);
    let mut first_beam_miss = None;
    for seed in 0..200u64 {
        let vocab = 2 + (seed % 4) as usize;
        let max_len = 1 + ((seed / 4) % 5) as usize;
        let lm = ToyLm { vocab, seed };
        let (want, want_score) = brute_force(&lm, max_len);
        let cfg = SearchConfig {
            k: vocab,
            max_summary_len: max_len,
            trigram_blocking: false,
            end_id: 0,
            banned_ids: vec![],
            ..SearchConfig::default()
        };
        let bf = best_first_search(&lm, &cfg).expect("search");
        let top = &bf.hypotheses[0];
        if top.ids != want || (top.score - want_score).abs() > 1e-12 {
            bf_miss += 1;
        }
        // Beam runs to full length: the pool is large enough never to stop it early.
        let full = SearchConfig {
            answer_pool_size: Some(usize::MAX),
            ..cfg
        };
        let beam = beam_search(&lm, &full).expect("search");
        if beam.best().map(|h| &h.ids) != Some(&want) {
            beam_miss += 1;
            first_beam_miss.get_or_insert((seed, vocab, max_len));
        }
        // Diagnostic: a beam wide enough never to prune must agree.
        let wide = SearchConfig {
            k: vocab.pow(max_len as u32),
            ..full
        };
        if beam_search(&lm, &wide)
            .expect("search")
            .best()
            .map(|h| &h.ids)
            != Some(&want)
        {
            wide_miss += 1;
        }
        n += 1;
    }
    let mut detail = format!("{n} toy LMs (|V| 2..5, length 1..5): best-first {bf_miss} mismatches, beam k=|V| {beam_miss} mismatches");
    if let Some((seed, v, l)) = first_beam_miss {
        detail += &format!(" (first: seed {seed}, |V| {v}, length {l})");
    }
    detail += &format!("; unpruned beam {wide_miss} mismatches");
    outcome(bf_miss == 0 && beam_miss == 0, detail)
}

fn reranker_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut order_breaks = 0;
    for _ in 0..200 {
        let size = rng.random_range(1..=12usize);
        let pool: Vec<Hypothesis> = (0..size)
            .map(|_| {
                let len = rng.random_range(1..=10usize);
                let probs: Vec<f64> = (0..len).map(|_| rng.random_range(0.01..1.0)).collect();
                let mut ids: Vec<u32> = (0..len - 1).map(|_| rng.random_range(4..50)).collect();
                ids.push(1);
                Hypothesis {
                    ids,
                    score: probs.iter().map(|p| p.ln()).sum(),
                    completed: true,
                }
            })
            .collect();
        let features: Vec<CandidateFeatures> = pool
            .iter()
            .map(|h| CandidateFeatures {
                words: h.ids.len() - 1,
                copy_rate: Some(rng.random_range(0.05..1.0)),
            })
            .collect();
        let cfg = RerankConfig {
            method: RerankMethod::BpNorm,
            ..RerankConfig::default()
        };
        let ranked = rerank(&pool, &features, &cfg, None).expect("rerank");
        for ((h, f), s) in pool.iter().zip(&features).zip(&ranked.scores) {
            let r = cfg.scaled_copy_rate(f.copy_rate.unwrap());
            let bp = (1.0 - 1.0 / r).exp().min(1.0);
            let geo = h.score.exp().powf(1.0 / h.ids.len() as f64);
            worst = worst.max((s.unwrap().exp() - bp * geo).abs());
        }
        let none = rerank(&pool, &features, &RerankConfig::default(), None).expect("rerank");
        let zero = RerankConfig {
            method: RerankMethod::Sbwr,
            r_sbwr: 0.0,
            ..RerankConfig::default()
        };
        let sbwr =
            rerank(&pool, &features, &zero, Some(rng.random_range(1.0..12.0))).expect("rerank");
        if none.order != sbwr.order {
            order_breaks += 1;
        }
    }
    let bp_at_one = brevity_penalty(1.0).ln().abs();
    let ln = length_norm(-4.0, 2);
    let pass = worst < 1e-9 && bp_at_one == 0.0 && order_breaks == 0 && ln == -2.0;
    outcome(
        pass,
        format!(
            "bp identity max error {worst:.2e}; r=1 log bp {bp_at_one}; sbwr r=0 order changes {order_breaks}/200; length_norm(-4, 2) = {ln}"
        ),
    )
}

fn trigram_blocking(results: &[PresetResult]) -> Outcome {
    let mut total = 0;
    let mut repeated = 0;
    for r in results {
        for s in &r.summaries {
            total += 1;
            if has_repeated_trigram(&words(&s.summary)) {
                repeated += 1;
            }
        }
    }
    outcome(
        repeated == 0 && total > 0,
        format!("{total} decoded summaries, {repeated} with a repeated trigram"),
    )
}

fn corruption_statistics() -> Outcome {
    let p = 0.9;
    let cfg = SamplingConfig::new(p, p, p).expect("rates");
    let seq = JointSequence::with_target(
        &(4..54).collect::<Vec<u32>>(),
        &(60..110).collect::<Vec<u32>>(),
    )
    .expect("seq");
    let cats = categorize_tokens(&seq);
    let eligible = cats.iter().filter(|c| cfg.rate(**c) > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut n, mut selected) = (0usize, 0usize);
    let mut counts = [0usize; 3];
    while n < 200_000 {
        let (_, record) = sample_and_corrupt(&seq, &cats, &cfg, 200, &mut rng).expect("corrupt");
        n += eligible;
        selected += record.len();
        for a in &record.actions {
            counts[match a {
                Corruption::Mask => 0,
                Corruption::Random => 1,
                Corruption::Keep => 2,
            }] += 1;
        }
    }
    let rate = selected as f64 / n as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let z = (rate - p).abs() / sigma;
    let mix: Vec<f64> = counts.iter().map(|&c| c as f64 / selected as f64).collect();
    let mix_ok = mix
        .iter()
        .zip([0.8, 0.1, 0.1])
        .all(|(m, t)| (m - t).abs() <= 0.01);
    let categories = cats.iter().filter(|c| **c != TokenCategory::Source).count();
    outcome(
        z <= 3.0 && mix_ok,
        format!(
            "{n} positions ({categories} summary + {} source per sequence): rate {rate:.5} ({z:.2}σ), mix {:.4}/{:.4}/{:.4}",
            eligible - categories,
            mix[0],
            mix[1],
            mix[2]
        ),
    )
}

fn metric_oracles() -> Outcome {
    let c1 = copy_rate("a b c", "x a b y", 1).unwrap();
    let c2 = copy_rate("a b c", "x a b y", 2).unwrap();
    let r1 = rouge_n("a b d", "a b c", 1).f1;
    let rl = rouge_l("c b a", "a b c").f1;
    let pass = (c1 - 66.67).abs() <= 0.01
        && c2 == 50.0
        && (r1 - 0.6667).abs() <= 1e-4
        && (rl - 0.3333).abs() <= 1e-4;
    outcome(
        pass,
        format!("copy1 {c1:.4}, copy2 {c2:.4}, ROUGE-1 F {r1:.5}, ROUGE-L F {rl:.5}"),
    )
}

fn sweep_config() -> SweepConfig {
    let mut cfg = SweepConfig {
        seed: 0,
        ..SweepConfig::default()
    };
    cfg.model.max_positions = 32;
    cfg.train.epochs = 15;
    cfg
}

fn run_sweep(dir: &std::path::Path) -> Vec<PresetResult> {
    let corpus = synth_generate(&SynthConfig::default()).expect("corpus");
    let presets: Vec<String> = PRESET_NAMES.iter().map(|s| s.to_string()).collect();
    let mut done: Vec<PresetResult> = Vec::new();
    sweep(
        &corpus.train,
        &corpus.valid,
        &corpus.test,
        &presets,
        &sweep_config(),
        |r| {
            done.push(r.clone());
            write_sweep_outputs(dir, &done.iter().collect::<Vec<_>>())
        },
    )
    .expect("sweep")
}

fn row<'a>(results: &'a [PresetResult], preset: &str) -> &'a PresetResult {
    results
        .iter()
        .find(|r| r.preset == preset)
        .expect("preset present")
}

fn copy_trend(results: &[PresetResult]) -> Outcome {
    let avg: Vec<f64> = ["case-a", "case-b", "case-c"]
        .iter()
        .map(|p| row(results, p).row.copy.micro.average.unwrap_or(f64::NAN))
        .collect();
    let seen_only_unigram = row(results, "case-a").row.copy.micro.rates[0].unwrap_or(f64::NAN);
    let pass = avg[0] > avg[1] && avg[1] > avg[2] && seen_only_unigram >= 95.0;
    outcome(
        pass,
        format!(
            "average copy a/b/c = {:.2} > {:.2} > {:.2}; seen-only 1-gram {seen_only_unigram:.2} (>= 95)",
            avg[0], avg[1], avg[2]
        ),
    )
}

fn source_benefit(results: &[PresetResult]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (base, with) in [
        ("case-a", "case-e"),
        ("case-b", "case-f"),
        ("case-c", "case-g"),
        ("case-d", "case-h"),
    ] {
        let r2 = |p| 100.0 * row(results, p).row.rouge.rouge2.f1;
        let change = r2(with) - r2(base);
        // The tolerance is inclusive; allow for rounding in the subtraction.
        pass &= change >= -0.5 - 1e-9;
        parts.push(format!(
            "{}→{} {:.2}→{:.2} ({change:+.2})",
            &base[5..],
            &with[5..],
            r2(base),
            r2(with)
        ));
    }
    outcome(pass, format!("ROUGE-2 {} (drop <= 0.5)", parts.join(", ")))
}

fn reproducibility(first: &std::path::Path, second: &std::path::Path) -> Outcome {
    let mut names: Vec<_> = std::fs::read_dir(first)
        .expect("dir")
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let a = std::fs::read(first.join(name)).expect("read");
        let b = std::fs::read(second.join(name)).unwrap_or_default();
        if a != b {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    let count = std::fs::read_dir(second).expect("dir").count();
    let pass = differing.is_empty() && count == names.len() && !names.is_empty();
    outcome(
        pass,
        format!(
            "{} files compared, {} differ {:?}",
            names.len(),
            differing.len(),
            differing
        ),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, start: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!(
            "{tag} {name}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };

    let t = Instant::now();
    report("mask exactness", t, mask_exactness());
    let t = Instant::now();
    report("causality", t, causality());
    let t = Instant::now();
    report("gradient check", t, gradient_check());
    let t = Instant::now();
    report("search optimality oracle", t, search_oracle());
    let t = Instant::now();
    report("reranker identities", t, reranker_identities());
    let t = Instant::now();
    report("corruption statistics", t, corruption_statistics());
    let t = Instant::now();
    report("metric oracles", t, metric_oracles());

    let dir = tempfile::tempdir().expect("tempdir");
    let (first, second) = (dir.path().join("run1"), dir.path().join("run2"));
    let t = Instant::now();
    let results = run_sweep(&first);
    println!(
        "sweep of {} presets finished in {:.1}s",
        results.len(),
        t.elapsed().as_secs_f64()
    );
    print!(
        "{}",
        std::fs::read_to_string(first.join("report.txt")).unwrap_or_default()
    );
    report("copy-control trend", t, copy_trend(&results));
    report("source-token training benefit", t, source_benefit(&results));
    report("trigram blocking", t, trigram_blocking(&results));
    let t = Instant::now();
    run_sweep(&second);
    report(
        "end-to-end reproducibility",
        t,
        reproducibility(&first, &second),
    );

    println!("{failures} criteria failed");
    // Failures are reported, not hidden; set ACCEPTANCE_STRICT=1 to turn them into a non-zero exit.
    if failures > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
