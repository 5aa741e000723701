mod common;

use std::collections::BTreeSet;
use std::io::Cursor;
use std::path::Path;

use distner::annotate::{annotation_quality, sample_training_spans, Annotator, WeightedSpan};
use distner::corpus::{bio_to_spans, read_jsonl, spans_to_bio, write_predictions_to, LabeledSpan, Sentence, SpanRef, TypeList};
use distner::embedding::EmbeddingTable;
use distner::eval::{evaluate, id_ood_split, EvalOptions, TokenOverlap};
use distner::inference::{dp_partition, predict_sentence, CandidateSet};
use distner::lexicon::{annotation_weight, extend_dictionary, frequent_headwords, headword, DictEntry, ExtConfig};
use distner::model::softmax;
use distner::synthetic::{generate, SyntheticConfig};
use ndarray::Array1;
use proptest::prelude::*;

fn types() -> TypeList {
    TypeList::new(["A", "B"], "None").unwrap()
}

/// Lays out `(gap, len, label)` triples left to right.
fn layout(parts: &[(usize, usize, usize)], tail: usize) -> (usize, Vec<LabeledSpan>) {
    let mut pos = 0;
    let mut spans = Vec::new();
    for &(gap, len, label) in parts {
        let start = pos + gap + 1;
        spans.push(LabeledSpan::new(start, start + len - 1, label));
        pos = start + len - 1;
    }
    (pos + tail, spans)
}

fn span_sets() -> impl Strategy<Value = (usize, Vec<LabeledSpan>)> {
    (prop::collection::vec((0usize..3, 1usize..4, 0usize..2), 0..5), 0usize..3)
        .prop_filter_map("need a token", |(parts, tail)| {
            let (n, spans) = layout(&parts, tail);
            (n > 0).then_some((n, spans))
        })
}

fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

fn prob_rows(n_labels: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(1e-6f64..1.0, n_labels), 60)
}

fn candidates(n: usize, m: usize, rows: &[Vec<f64>]) -> CandidateSet {
    let mut k = 0;
    CandidateSet::from_fn(n, m, |_| {
        let row = &rows[k % rows.len()];
        k += 1;
        let z: f64 = row.iter().sum();
        row.iter().map(|v| v / z).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predictions_round_trip_as_gold((n, spans) in span_sets()) {
        let types = types();
        let sentence = Sentence::new(words(n));
        let mut buf = Vec::new();
        write_predictions_to(&mut buf, &[sentence], std::slice::from_ref(&spans), &types).unwrap();
        let back = read_jsonl(Cursor::new(buf), Path::new("mem"), &types).unwrap();
        prop_assert_eq!(back[0].gold.clone().unwrap(), spans);
    }

    #[test]
    fn bio_conversion_is_invertible((n, spans) in span_sets()) {
        let types = types();
        let tags = spans_to_bio(n, &spans, &types);
        prop_assert_eq!(tags.len(), n);
        prop_assert_eq!(bio_to_spans(&tags, &types).unwrap(), spans);
    }

    #[test]
    fn dp_partition_is_complete_and_prefix_stable(
        n in 1usize..9,
        m in 1usize..5,
        rows in prob_rows(3),
        extra in prop::collection::vec(1e-6f64..1.0, 3),
    ) {
        let cands = candidates(n, m, &rows);
        let dp = dp_partition(&cands, 2);
        let mut next = 1;
        for s in &dp.spans {
            prop_assert_eq!(s.start, next);
            prop_assert!(s.len() <= m);
            next = s.end + 1;
        }
        prop_assert_eq!(next, n + 1);
        let singles: f64 = (1..=n).map(|i| cands.get(SpanRef::new(i, i)).unwrap()[2].ln()).sum();
        prop_assert!(dp.objective <= singles + 1e-12);

        // one more token; spans inside the old sentence keep their rows
        let longer = CandidateSet::from_fn(n + 1, m, |s| {
            if s.end <= n {
                cands.get(s).unwrap().to_vec()
            } else {
                extra.clone()
            }
        });
        let grown = dp_partition(&longer, 2);
        for j in 0..=n {
            prop_assert!((grown.prefix[j] - dp.prefix[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_logit_shift(
        logits in prop::collection::vec(-20.0f64..20.0, 1..6),
        shift in -50.0f64..50.0,
    ) {
        let a = softmax(Array1::from(logits.clone()).view());
        let b = softmax(Array1::from(logits).mapv(|v| v + shift).view());
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_is_a_distribution(seed in 0u64..1000) {
        let (model, tokens, _) = common::random_instance(seed, (seed % 3) as usize, seed % 2 == 0);
        let enc = model.encode(&tokens);
        for i in 1..=tokens.len() {
            for j in i..=tokens.len() {
                let fwd = model.span_forward(&enc, SpanRef::new(i, j));
                for a in &fwd.attention {
                    prop_assert!(a.iter().all(|&v| v >= 0.0));
                    prop_assert!((a.sum() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn loss_is_positive_and_order_free(seed in 0u64..1000) {
        let (model, tokens, spans) = common::random_instance(seed, 1, true);
        let j = model.loss(&[(&tokens[..], &spans[..])]).unwrap();
        prop_assert!(j > 0.0);
        let mut reversed: Vec<WeightedSpan> = spans.clone();
        reversed.reverse();
        let j_rev = model.loss(&[(&tokens[..], &reversed[..])]).unwrap();
        prop_assert!((j - j_rev).abs() <= 1e-9);
        let (jg, _) = model.loss_and_grad(&[(&tokens[..], &reversed[..])]).unwrap();
        prop_assert!((j - jg).abs() <= 1e-9);
    }

    #[test]
    fn predictions_are_disjoint_typed_and_repeatable(seed in 0u64..1000, m in 1usize..4) {
        let (model, tokens, _) = common::random_instance(seed, 1, true);
        let m = m.min(model.config.max_span_len);
        let first = predict_sentence(&tokens, &model, m).unwrap();
        prop_assert_eq!(&first, &predict_sentence(&tokens, &model, m).unwrap());
        for (k, s) in first.iter().enumerate() {
            prop_assert!(s.span.start >= 1 && s.span.end <= tokens.len() && s.span.len() <= m);
            prop_assert!(!model.types.is_none(s.label));
            for t in &first[k + 1..] {
                prop_assert!(!s.span.overlaps(&t.span));
            }
        }
    }

    #[test]
    fn weight_is_monotone_for_nonnegative_slope(
        theta1 in 0.0f64..5.0,
        theta2 in -5.0f64..5.0,
        a in 0.001f64..1.0,
        b in 0.001f64..1.0,
    ) {
        let cfg = ExtConfig { theta1, theta2, ..Default::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(annotation_weight(lo, &cfg) <= annotation_weight(hi, &cfg));
        prop_assert!(annotation_weight(hi, &cfg) <= annotation_weight(1.0, &cfg));
    }
}

#[derive(Debug)]
struct Lexicon {
    table: EmbeddingTable,
    dict: Vec<DictEntry>,
    phrases: Vec<Vec<String>>,
}

fn lexicons() -> impl Strategy<Value = Lexicon> {
    let heads = 2usize..7;
    heads
        .prop_flat_map(|h| {
            let vectors = prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), h);
            let phrase = (prop::collection::vec(0usize..3, 0..3), 0..h);
            let dict = prop::collection::vec((phrase.clone(), 0usize..2), 1..20);
            let phrases = prop::collection::vec(phrase, 0..15);
            (vectors, dict, phrases)
        })
        .prop_map(|(vectors, dict, phrases)| {
            let heads: Vec<String> = (0..vectors.len()).map(|k| format!("h{k}")).collect();
            let make = |(mods, head): (Vec<usize>, usize)| -> Vec<String> {
                let mut p: Vec<String> = mods.iter().map(|m| format!("m{m}")).collect();
                p.push(heads[head].clone());
                p
            };
            Lexicon {
                table: EmbeddingTable::from_pairs(3, false, heads.iter().cloned().zip(vectors)).unwrap(),
                dict: dict.into_iter().map(|(p, l)| DictEntry::new(make(p), l)).collect(),
                phrases: phrases.into_iter().map(make).collect(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn extension_invariants(lex in lexicons(), tau1 in 1usize..5, tau2 in -0.5f64..1.0) {
        let cfg = ExtConfig { tau1, tau2, ..Default::default() };
        let out = extend_dictionary(&lex.dict, &lex.phrases, &cfg, &lex.table);
        let originals: BTreeSet<&[String]> = lex.dict.iter().map(|e| e.mention.as_slice()).collect();
        for e in &lex.dict {
            prop_assert!(out.iter().any(|x| x.mention == e.mention && x.label == e.label && x.similarity == 1.0));
        }
        let frequent = frequent_headwords(&lex.dict, &cfg);
        for x in out.iter().filter(|x| !originals.contains(x.mention.as_slice())) {
            prop_assert!(x.similarity >= tau2 && x.similarity <= 1.0 + 1e-12);
            let hp = headword(&x.mention).unwrap();
            // maximum over every qualifying entry, shared by all emitted types
            let best = lex
                .dict
                .iter()
                .filter(|e| frequent.contains(headword(&e.mention).unwrap()))
                .filter_map(|e| lex.table.cosine_sim(hp, headword(&e.mention).unwrap()))
                .filter(|&s| s >= tau2)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(x.similarity, best);
            let with_label = lex.dict.iter().any(|e| {
                e.label == x.label
                    && frequent.contains(headword(&e.mention).unwrap())
                    && lex.table.cosine_sim(hp, headword(&e.mention).unwrap()) == Some(best)
            });
            prop_assert!(with_label);
        }
    }

    #[test]
    fn raising_thresholds_prunes(lex in lexicons(), tau1 in 1usize..4, tau2 in -0.5f64..0.9, dt in 0.0f64..0.5) {
        let originals: BTreeSet<Vec<String>> = lex.dict.iter().map(|e| e.mention.clone()).collect();
        let added = |cfg: &ExtConfig| -> BTreeSet<(Vec<String>, usize)> {
            extend_dictionary(&lex.dict, &lex.phrases, cfg, &lex.table)
                .into_iter()
                .filter(|e| !originals.contains(&e.mention))
                .map(|e| (e.mention, e.label))
                .collect()
        };
        let base = ExtConfig { tau1, tau2, ..Default::default() };
        let before = added(&base);
        let stricter_sim = added(&ExtConfig { tau2: tau2 + dt, ..base.clone() });
        prop_assert!(stricter_sim.is_subset(&before));
        // a higher tau1 can swap the winning headword, so only the set of
        // covered phrases is monotone
        let phrases = |s: &BTreeSet<(Vec<String>, usize)>| s.iter().map(|p| p.0.clone()).collect::<BTreeSet<_>>();
        let stricter_freq = added(&ExtConfig { tau1: tau1 + 1, ..base });
        prop_assert!(phrases(&stricter_freq).is_subset(&phrases(&before)));
    }

    #[test]
    fn annotations_are_disjoint_dictionary_matches(lex in lexicons(), sentence in prop::collection::vec(0usize..10, 1..25)) {
        let types = types();
        let cfg = ExtConfig { tau1: 1, ..Default::default() };
        let entries = extend_dictionary(&lex.dict, &lex.phrases, &cfg, &lex.table);
        let vocab = ["m0", "m1", "m2", "h0", "h1", "h2", "h3", "h4", "h5", "x"];
        let tokens: Vec<String> = sentence.iter().map(|&i| vocab[i].to_string()).collect();
        let annotator = Annotator::new(&entries, &types, &cfg, false);
        let mut annotated = annotator.annotate_corpus(&[Sentence::new(tokens.clone())]);
        let spans = &annotated[0].positives;
        for (k, s) in spans.iter().enumerate() {
            let text = s.span.slice(&tokens);
            prop_assert!(entries.iter().any(|e| e.mention == text));
            for t in &spans[k + 1..] {
                prop_assert!(!s.span.overlaps(&t.span));
            }
        }
        sample_training_spans(&mut annotated, &types, 4, 3.0, 1).unwrap();
        for neg in &annotated[0].negatives {
            prop_assert_eq!(&neg.weights, &vec![0.0, 0.0, 1.0]);
        }
    }
}

#[test]
fn extension_does_not_lower_annotation_recall() {
    for seed in 0..5 {
        let cfg = SyntheticConfig {
            seed,
            train_sentences: 150,
            test_sentences: 1,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        let ext_cfg = ExtConfig::default();
        let recall = |phrases: &[Vec<String>]| {
            let entries = extend_dictionary(&data.dictionary, phrases, &ext_cfg, &data.embeddings);
            let annotated = Annotator::new(&entries, &data.types, &ext_cfg, false).annotate_corpus(&data.train);
            annotation_quality(&annotated, &data.train).unwrap().recall
        };
        let base = recall(&[]);
        let extended = recall(&data.phrases);
        assert!(extended >= base, "corpus {seed}: {extended} < {base}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluation_is_order_free_and_decomposes(
        docs in prop::collection::vec((span_sets(), prop::collection::vec((0usize..6, 0usize..6, 0usize..2), 0..4)), 1..6),
        rotate in 0usize..6,
    ) {
        let types = types();
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        for ((n, spans), guesses) in &docs {
            gold.push(Sentence::new(words(*n)).with_gold(spans.clone(), &types).unwrap());
            let mut p: Vec<LabeledSpan> = Vec::new();
            for &(a, b, l) in guesses {
                let (i, j) = (a.min(b) % n + 1, a.max(b) % n + 1);
                let s = LabeledSpan::new(i.min(j), i.max(j), l);
                if p.iter().all(|q| !q.span.overlaps(&s.span)) {
                    p.push(s);
                }
            }
            preds.push(p);
        }
        let report = evaluate(&preds, &gold, &types, EvalOptions::default()).unwrap();

        let k = rotate % gold.len();
        gold.rotate_left(k);
        preds.rotate_left(k);
        let rotated = evaluate(&preds, &gold, &types, EvalOptions::default()).unwrap();
        prop_assert_eq!(report.overall.counts, rotated.overall.counts);

        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for s in report.per_type.values() {
            tp += s.counts.tp;
            fp += s.counts.fp;
            fn_ += s.counts.fn_;
        }
        prop_assert_eq!((tp, fp, fn_), (report.overall.counts.tp, report.overall.counts.fp, report.overall.counts.fn_));
        if tp > 0 {
            let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64);
            prop_assert!((report.overall.f1 - 2.0 * p * r / (p + r)).abs() <= 1e-12);
        }
    }

    #[test]
    fn id_and_ood_partition_gold((n, spans) in span_sets(), dict_tokens in prop::collection::vec(0usize..12, 0..4)) {
        let types = types();
        let sentence = Sentence::new(words(n)).with_gold(spans.clone(), &types).unwrap();
        let dict: Vec<DictEntry> = dict_tokens.iter().map(|&t| DictEntry::new([format!("t{t}")], 0)).collect();
        let (id, ood) = id_ood_split(&[sentence], &TokenOverlap::new(&dict, false)).unwrap();
        let id: BTreeSet<LabeledSpan> = id[0].iter().copied().collect();
        let ood: BTreeSet<LabeledSpan> = ood[0].iter().copied().collect();
        prop_assert!(id.is_disjoint(&ood));
        let all: BTreeSet<LabeledSpan> = spans.into_iter().collect();
        prop_assert_eq!(id.union(&ood).copied().collect::<BTreeSet<_>>(), all);
    }
}
