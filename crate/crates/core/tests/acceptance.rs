mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use distner::annotate::{annotation_quality, sample_training_spans, Annotator};
use distner::corpus::{LabeledSpan, Sentence, SpanRef, TypeList};
use distner::embedding::EmbeddingTable;
use distner::eval::{evaluate, EvalOptions};
use distner::inference::{dp_partition, generate_candidates, predict_sentence, CandidateSet};
use distner::lexicon::{annotation_weight, extend_dictionary, DictEntry, ExtConfig, ExtDictEntry};
use distner::model::{train, ModelConfig, SpanModel, StaticEncoder, TrainConfig};
use distner::synthetic::{generate, SyntheticConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- DP oracle

fn closed_form(n: usize, m: usize) -> usize {
    let m = m.min(n);
    m * (2 * n - m + 1) / 2
}

/// Objectives of every partition with spans of at most `m` tokens, sorted.
fn brute_force(cands: &CandidateSet, none: usize, m: usize) -> Vec<(f64, Vec<SpanRef>)> {
    let n = cands.num_tokens();
    let mut out = Vec::new();
    for cuts in 0u32..(1 << (n - 1)) {
        let mut spans = Vec::new();
        let mut start = 1;
        for t in 1..n {
            if cuts & (1 << (t - 1)) != 0 {
                spans.push(SpanRef::new(start, t));
                start = t + 1;
            }
        }
        spans.push(SpanRef::new(start, n));
        if spans.iter().any(|s| s.len() > m) {
            continue;
        }
        let obj: f64 = spans
            .iter()
            .map(|&s| cands.get(s).unwrap()[none].max(1e-12).ln())
            .sum();
        out.push((obj, spans));
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

fn dp_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut unique = 0;
    for case in 0..500 {
        let n = rng.gen_range(1..=10);
        let m = rng.gen_range(1..=5);
        let n_labels = rng.gen_range(2..=4);
        let none = n_labels - 1;
        let cands = CandidateSet::from_fn(n, m, |_| {
            let raw: Vec<f64> = (0..n_labels).map(|_| rng.gen_range(1e-6..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        });
        let dp = dp_partition(&cands, none);
        let all = brute_force(&cands, none, m);
        let (best, ref best_spans) = all[0];
        ensure(
            (dp.objective - best).abs() <= 1e-9,
            format!("case {case}: dp {} vs exhaustive {best}", dp.objective),
        )?;
        let recomputed: f64 = dp.spans.iter().map(|&s| cands.get(s).unwrap()[none].max(1e-12).ln()).sum();
        ensure(
            (recomputed - best).abs() <= 1e-9,
            format!("case {case}: dp partition scores {recomputed}, optimum {best}"),
        )?;
        ensure(
            all.iter().any(|(_, p)| *p == dp.spans),
            format!("case {case}: dp partition is not a legal partition"),
        )?;
        if all.len() == 1 || all[1].0 - best > 1e-9 {
            unique += 1;
            ensure(&dp.spans == best_spans, format!("case {case}: dp picked a different optimum"))?;
        }
        ensure(
            dp.iterations == closed_form(n, m),
            format!("case {case}: {} iterations, expected {}", dp.iterations, closed_form(n, m)),
        )?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("500 sets ({unique} with a unique optimum) in {elapsed:.2?}"))
}

// ------------------------------------------------------------ gradient check

fn gradient_check() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        worst = worst.max(common::max_rel_error(seed, 0, true));
    }
    ensure(worst <= 1e-4, format!("max relative error {worst:e}"))?;
    Ok(format!("20 instances, max relative error {worst:.2e}"))
}

// ----------------------------------------------------------- weight function

fn weight_function() -> Check {
    let cfg = ExtConfig::default();
    ensure(annotation_weight(1.0, &cfg) == 1.0, "w(1) != 1")?;
    // 1 / (1 + e^0.1)
    let w = annotation_weight(0.4, &cfg);
    ensure((w - 0.47502081252106).abs() <= 1e-4, format!("w(0.4) = {w}"))?;
    let grid: Vec<f64> = (1..=100).map(|k| annotation_weight(k as f64 / 100.0, &cfg)).collect();
    ensure(grid.windows(2).all(|p| p[1] >= p[0]), "not monotone on the grid")?;
    Ok(format!("w(0.4) = {w:.6}, monotone on 100 points"))
}

// ----------------------------------------------------------- candidate count

fn candidate_count() -> Check {
    let table = EmbeddingTable::from_pairs(3, false, [("a", vec![1.0, 0.0, 0.0]), ("b", vec![0.0, 1.0, 0.0])]).unwrap();
    let types = TypeList::new(["A", "B"], "None").unwrap();
    let cfg = ModelConfig {
        hidden_dim: 4,
        attn_dim: 3,
        max_span_len: 6,
        context_radius: 1,
        shared_attention: true,
    };
    let model = SpanModel::new(StaticEncoder::with_radius(Arc::new(table), 4, 1), types, cfg, 1);
    let mut checked = 0;
    for n in 0..=20 {
        let tokens: Vec<String> = (0..n).map(|i| ["a", "b", "oov"][i % 3].to_string()).collect();
        for m in 1..=6 {
            let cands = generate_candidates(&tokens, &model, m);
            let spans: BTreeSet<SpanRef> = cands.iter().map(|(s, _)| s).collect();
            ensure(
                cands.len() == closed_form(n, m) && spans.len() == cands.len(),
                format!("N={n} M={m}: {} rows, expected {}", cands.len(), closed_form(n, m)),
            )?;
            ensure(
                spans.iter().all(|s| s.start >= 1 && s.end <= n && s.len() <= m),
                format!("N={n} M={m}: illegal span"),
            )?;
            checked += 1;
        }
    }
    Ok(format!("{checked} (N, M) pairs"))
}

// ----------------------------------------------------------- extension trace

fn entry(words: &str, label: usize, s: f64) -> ExtDictEntry {
    ExtDictEntry {
        mention: words.split(' ').map(str::to_string).collect(),
        label,
        similarity: s,
    }
}

fn extension_traces() -> Check {
    let table = EmbeddingTable::from_pairs(
        2,
        false,
        [("cancer", vec![1.0, 0.2]), ("aspirin", vec![-0.3, 1.0])],
    )
    .unwrap();
    let dict = vec![
        DictEntry::new(["liver", "cancer"], 0),
        DictEntry::new(["lung", "cancer"], 0),
        DictEntry::new(["appendix", "cancer"], 0),
        DictEntry::new(["aspirin"], 1),
    ];
    let originals: Vec<ExtDictEntry> = vec![
        entry("appendix cancer", 0, 1.0),
        entry("aspirin", 1, 1.0),
        entry("liver cancer", 0, 1.0),
        entry("lung cancer", 0, 1.0),
    ];
    let as_set = |v: Vec<ExtDictEntry>| -> BTreeSet<(Vec<String>, usize, u64)> {
        v.into_iter().map(|e| (e.mention, e.label, e.similarity.to_bits())).collect()
    };
    let phrases = vec![vec!["skin".to_string(), "cancer".to_string()]];

    let cfg = ExtConfig {
        tau1: 2,
        tau2: 0.8,
        ..Default::default()
    };
    let mut expected = originals.clone();
    expected.push(entry("skin cancer", 0, 1.0));
    ensure(
        as_set(extend_dictionary(&dict, &phrases, &cfg, &table)) == as_set(expected),
        "trace 1: tau1=2 should add (skin cancer, Disease, 1)",
    )?;

    let cfg = ExtConfig { tau1: 5, ..cfg };
    ensure(
        as_set(extend_dictionary(&dict, &phrases, &cfg, &table)) == as_set(originals.clone()),
        "trace 2: tau1=5 should keep only the originals",
    )?;

    let none: Vec<Vec<String>> = Vec::new();
    ensure(
        as_set(extend_dictionary(&dict, &none, &ExtConfig::default(), &table)) == as_set(originals),
        "trace 3: no phrases should copy the dictionary",
    )?;

    let cases = extension_properties()?;
    Ok(format!("3 traces, properties on {cases} random dictionaries"))
}

fn extension_properties() -> std::result::Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cases = 60;
    for case in 0..cases {
        let heads: Vec<String> = (0..rng.gen_range(2..8)).map(|k| format!("h{k}")).collect();
        let mods = ["m0", "m1", "m2", "m3"];
        let table = EmbeddingTable::from_pairs(
            4,
            false,
            heads
                .iter()
                .map(|h| (h.as_str(), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())),
        )
        .unwrap();
        let phrase = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let mut p: Vec<String> = (0..rng.gen_range(0..3)).map(|_| mods[rng.gen_range(0..4)].to_string()).collect();
            p.push(heads[rng.gen_range(0..heads.len())].clone());
            p
        };
        let dict: Vec<DictEntry> = (0..rng.gen_range(1..25))
            .map(|_| DictEntry::new(phrase(&mut rng), rng.gen_range(0..3)))
            .collect();
        let phrases: Vec<Vec<String>> = (0..rng.gen_range(0..20)).map(|_| phrase(&mut rng)).collect();
        let original_pairs: BTreeSet<(Vec<String>, usize)> = dict.iter().map(|e| (e.mention.clone(), e.label)).collect();
        let original_mentions: BTreeSet<Vec<String>> = dict.iter().map(|e| e.mention.clone()).collect();

        let run = |tau1: usize, tau2: f64| {
            let out = extend_dictionary(&dict, &phrases, &ExtConfig { tau1, tau2, ..Default::default() }, &table);
            let pairs: BTreeSet<(Vec<String>, usize)> = out
                .iter()
                .filter(|e| !original_mentions.contains(&e.mention))
                .map(|e| (e.mention.clone(), e.label))
                .collect();
            (out, pairs)
        };
        let mut previous_tau2: Option<BTreeSet<(Vec<String>, usize)>> = None;
        for tau2 in [-0.5, 0.0, 0.3, 0.6, 0.9, 1.0] {
            let mut previous_tau1: Option<BTreeSet<Vec<String>>> = None;
            for tau1 in 1..=6 {
                let (out, pairs) = run(tau1, tau2);
                for pair in &original_pairs {
                    ensure(
                        out.iter().any(|e| (&e.mention, e.label) == (&pair.0, pair.1) && e.similarity == 1.0),
                        format!("case {case}: original {:?} missing or not at s=1", pair.0),
                    )?;
                }
                let phrases_hit: BTreeSet<Vec<String>> = pairs.iter().map(|p| p.0.clone()).collect();
                if let Some(prev) = &previous_tau1 {
                    ensure(
                        phrases_hit.is_subset(prev),
                        format!("case {case}: raising tau1 to {tau1} added extended phrases"),
                    )?;
                }
                previous_tau1 = Some(phrases_hit);
            }
            let (_, pairs) = run(1, tau2);
            if let Some(prev) = &previous_tau2 {
                ensure(
                    pairs.is_subset(prev),
                    format!("case {case}: raising tau2 to {tau2} added extended entries"),
                )?;
            }
            previous_tau2 = Some(pairs);
        }
    }
    Ok(cases)
}

// -------------------------------------------------------------- synthetic run

const LEARNING_RATE: f64 = 0.005;
const EPOCHS: usize = 40;
const TOKENS_PER_BATCH: usize = 100;
const WARMUP: usize = 10;
const HIDDEN: usize = 32;
const ATTN: usize = 16;

struct PipelineRun {
    annotation_recall: f64,
    f1: f64,
    elapsed: Duration,
}

fn run_pipeline(seed: u64, extend: bool) -> distner::Result<PipelineRun> {
    let start = Instant::now();
    let data = generate(&SyntheticConfig::default())?;
    let ext_cfg = ExtConfig::default();
    let phrases = if extend { data.phrases.clone() } else { Vec::new() };
    let entries = extend_dictionary(&data.dictionary, &phrases, &ext_cfg, &data.embeddings);
    let annotator = Annotator::new(&entries, &data.types, &ext_cfg, false);
    let mut annotated = annotator.annotate_corpus(&data.train);
    let quality = annotation_quality(&annotated, &data.train)?;
    sample_training_spans(&mut annotated, &data.types, 5, 5.0, seed)?;

    let config = ModelConfig {
        hidden_dim: HIDDEN,
        attn_dim: ATTN,
        ..Default::default()
    };
    let encoder = StaticEncoder::with_radius(Arc::new(data.embeddings.clone()), HIDDEN, config.context_radius);
    let mut model = SpanModel::new(encoder, data.types.clone(), config, seed);
    let train_cfg = TrainConfig {
        learning_rate: LEARNING_RATE,
        epochs: EPOCHS,
        tokens_per_batch: TOKENS_PER_BATCH,
        attention_warmup: WARMUP,
        seed,
        ..Default::default()
    };
    train(&mut model, &annotated, None, &train_cfg)?;
    let preds = data
        .test
        .iter()
        .map(|s| predict_sentence(&s.tokens, &model, config.max_span_len))
        .collect::<distner::Result<Vec<_>>>()?;
    let report = evaluate(&preds, &data.test, &data.types, EvalOptions::default())?;
    Ok(PipelineRun {
        annotation_recall: quality.recall,
        f1: report.overall.f1,
        elapsed: start.elapsed(),
    })
}

fn synthetic_end_to_end(ext: &PipelineRun, base: &PipelineRun) -> Check {
    let gain = ext.annotation_recall - base.annotation_recall;
    let detail = format!(
        "annotation recall {:.3} vs {:.3} (gain {gain:.3}), test F1 {:.4}, run {:.1?}",
        ext.annotation_recall, base.annotation_recall, ext.f1, ext.elapsed
    );
    ensure(gain >= 0.10, format!("recall gain below 0.10: {detail}"))?;
    ensure(ext.f1 >= 0.85, format!("F1 below 0.85: {detail}"))?;
    ensure(ext.elapsed < Duration::from_secs(300), format!("slower than 5 min: {detail}"))?;
    Ok(detail)
}

fn ablation(runs: &[(f64, f64)]) -> Check {
    let wins = runs.iter().filter(|(e, b)| e > b).count();
    let detail = runs
        .iter()
        .map(|(e, b)| format!("{e:.3}/{b:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(wins * 2 > runs.len(), format!("extension won {wins}/{}: {detail}", runs.len()))?;
    Ok(format!("extension wins {wins}/{} (extended/base F1: {detail})", runs.len()))
}

// ------------------------------------------------------------- metric oracle

fn metric_oracle() -> Check {
    let types = TypeList::new(["A", "B"], "None").unwrap();
    let gold = Sentence::new((0..8).map(|i| format!("t{i}")))
        .with_gold(vec![LabeledSpan::new(1, 2, 0), LabeledSpan::new(4, 4, 1)], &types)
        .unwrap();
    let pred = vec![LabeledSpan::new(1, 2, 0), LabeledSpan::new(4, 5, 1), LabeledSpan::new(7, 7, 0)];
    let r = evaluate(&[pred], &[gold], &types, EvalOptions::default()).map_err(|e| e.to_string())?;
    let c = r.overall.counts;
    ensure((c.tp, c.fp, c.fn_) == (1, 2, 1), format!("counts {c:?}"))?;
    let (p, rc, f) = (r.overall.precision, r.overall.recall, r.overall.f1);
    ensure(
        (p - 1.0 / 3.0).abs() < 1e-12 && (rc - 0.5).abs() < 1e-12 && (f - 0.4).abs() < 1e-12,
        format!("P={p} R={rc} F1={f}"),
    )?;
    Ok(format!("P={p:.6} R={rc:.6} F1={f:.6}"))
}

// -------------------------------------------------------------- determinism

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_distner"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SyntheticConfig {
        train_sentences: 120,
        test_sentences: 40,
        ..Default::default()
    };
    let files = generate(&cfg)
        .and_then(|d| d.write_to_dir(dir.path()))
        .map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let s = |path: &Path| path.to_string_lossy().into_owned();
    let (dict, phrases, emb, train_file, test_file) = (
        s(&files.dictionary),
        s(&files.phrases),
        s(&files.embeddings),
        s(&files.train),
        s(&files.test),
    );
    cli(&["extend-dict", "--dict", &dict, "--phrases", &phrases, "--emb", &emb, "--out", &p("ext.tsv")])?;
    cli(&["annotate", "--ext", &p("ext.tsv"), "--corpus", &train_file, "--out", &p("ann.jsonl")])?;
    cli(&["sample", "--annotated", &p("ann.jsonl"), "--out", &p("sampled.jsonl"), "--seed", "3"])?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let model = p(&format!("model{run}.json"));
        let pred = p(&format!("pred{run}.jsonl"));
        cli(&[
            "train", "--train", &p("sampled.jsonl"), "--emb", &emb, "--out", &model, "--epochs", "8",
            "--lr", "0.005", "--tokens-per-batch", "100", "--attention-warmup", "3", "--hidden-dim", "16",
            "--attn-dim", "8", "--seed", "11",
        ])?;
        cli(&["predict", "--model", &model, "--emb", &emb, "--corpus", &test_file, "--out", &pred])?;
        outputs.push(std::fs::read(&pred).map_err(|e| e.to_string())?);
    }
    ensure(outputs[0] == outputs[1], "prediction files differ")?;
    let mentions: usize = String::from_utf8_lossy(&outputs[0])
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap_or_default();
            v["spans"].as_array().map_or(0, Vec::len)
        })
        .sum();
    ensure(mentions > 0, "no mentions predicted, identity would be vacuous")?;
    Ok(format!("two runs, {} identical bytes, {mentions} mentions", outputs[0].len()))
}

// ---------------------------------------------------------------------------

fn report(name: &str, result: Check) -> bool {
    match result {
        Ok(detail) => {
            println!("PASS  {name}: {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL  {name}: {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= report("dp-oracle", dp_oracle());
    ok &= report("gradient-check", gradient_check());
    ok &= report("weight-function", weight_function());
    ok &= report("candidate-count", candidate_count());
    ok &= report("extension-traces", extension_traces());

    let mut pairs = Vec::new();
    let mut first = None;
    let mut failure = None;
    for seed in 1..=3 {
        match run_pipeline(seed, true).and_then(|e| run_pipeline(seed, false).map(|b| (e, b))) {
            Ok((e, b)) => {
                pairs.push((e.f1, b.f1));
                if first.is_none() {
                    first = Some((e, b));
                }
            }
            Err(e) => failure = Some(format!("seed {seed}: {e}")),
        }
    }
    let end_to_end = match (&first, &failure) {
        (_, Some(f)) => Err(f.clone()),
        (Some((e, b)), None) => synthetic_end_to_end(e, b),
        (None, None) => Err("no run".into()),
    };
    ok &= report("synthetic-end-to-end", end_to_end);
    ok &= report(
        "ablation",
        match failure {
            Some(f) => Err(f),
            None => ablation(&pairs),
        },
    );

    ok &= report("metric-oracle", metric_oracle());
    ok &= report("determinism", determinism());
    if !ok {
        std::process::exit(1);
    }
}
