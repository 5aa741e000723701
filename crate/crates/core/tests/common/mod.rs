#![allow(dead_code)]

use std::sync::Arc;

use distner::annotate::WeightedSpan;
use distner::corpus::{SpanRef, TypeList};
use distner::embedding::EmbeddingTable;
use distner::model::{ModelConfig, ParamTensors, SpanModel, StaticEncoder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn random_instance(seed: u64, radius: usize, shared: bool) -> (SpanModel<StaticEncoder>, Vec<String>, Vec<WeightedSpan>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=8);
    let k = rng.gen_range(2..=6);
    let n_types = rng.gen_range(1..=3);
    let n = rng.gen_range(1..=6);
    let vocab = ["a", "b", "c", "d"];
    let table = EmbeddingTable::from_pairs(
        e,
        false,
        vocab.iter().map(|w| (*w, (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect())),
    )
    .unwrap();
    let types = TypeList::new((0..n_types).map(|i| format!("T{i}")), "None").unwrap();
    let cfg = ModelConfig {
        hidden_dim: d,
        attn_dim: k,
        max_span_len: n,
        context_radius: radius,
        shared_attention: shared,
    };
    let mut model = SpanModel::new(
        StaticEncoder::with_radius(Arc::new(table), d, radius),
        types.clone(),
        cfg,
        seed,
    );
    // move off the zero bias so every parameter has a generic gradient
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    // "zz" is out of vocabulary
    let tokens: Vec<String> = (0..n)
        .map(|_| ["a", "b", "c", "d", "zz"][rng.gen_range(0..5)].to_string())
        .collect();
    let mut spans = Vec::new();
    for _ in 0..rng.gen_range(1..=4) {
        let i = rng.gen_range(1..=n);
        let j = rng.gen_range(i..=n);
        let weights = if rng.gen_bool(0.5) {
            let mut w = vec![0.0; types.len()];
            w[types.none()] = 1.0;
            w
        } else {
            let mut w: Vec<f64> = (0..types.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            w[types.none()] = 0.0;
            w
        };
        spans.push(WeightedSpan {
            span: SpanRef::new(i, j),
            weights,
        });
    }
    (model, tokens, spans)
}

/// Largest relative error between analytic and central-difference gradients.
pub fn max_rel_error(seed: u64, radius: usize, shared: bool) -> f64 {
    let (mut model, tokens, spans) = random_instance(seed, radius, shared);
    let batch = [(&tokens[..], &spans[..])];
    let (_, grads) = model.loss_and_grad(&batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    for (ti, g) in analytic.iter().enumerate() {
        for (idx, &ga) in g.iter().enumerate() {
            let orig = model.params.tensors()[ti][idx];
            model.params.tensors_mut()[ti][idx] = orig + STEP;
            let plus = model.loss(&batch).unwrap();
            model.params.tensors_mut()[ti][idx] = orig - STEP;
            let minus = model.loss(&batch).unwrap();
            model.params.tensors_mut()[ti][idx] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

