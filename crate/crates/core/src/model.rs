//! Span type classifier.
//!
//! A sentence is padded with `<sos>`/`<eos>` and encoded into vectors
//! `h_0 .. h_{N+1}`. A span `<i,j>` splits them into left context, inner
//! content, and right context; each part is pooled with self-attention,
//!
//! ```text
//! a_z = softmax(w_z^T tanh(W H_z)),   m_z = H_z a_z^T
//! ```
//!
//! and `m = [m_lc; m_c; m_rc]` is scored against one embedding per type,
//! `p(l | m) = softmax_l(l^T m)`. Training minimises
//! `J = -sum_c sum_l w_l log p(l | m_c)` with Adam and global-norm clipping.
//!
//! Because `W` is shared between the three parts, `tanh(W h_t)` is computed
//! once per token and reused by every span of the sentence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{sample_training_spans, AnnotatedSentence, WeightedSpan};
use crate::corpus::{SpanRef, TypeList};
use crate::embedding::EmbeddingTable;
use crate::{Error, Result};

/// Floor applied before any standalone logarithm of a probability.
pub const PROB_FLOOR: f64 = 1e-12;

/// Flat access to every trainable tensor, in a fixed order.
pub trait ParamTensors: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Maps a padded sentence to one `d`-dimensional vector per position.
///
/// Implementations own the parameter layout; the attention, loss, and
/// inference code only sees the encoded matrix and the gradient flowing back
/// into it.
pub trait Encoder {
    type Params: ParamTensors;
    type Cache;

    fn output_dim(&self) -> usize;

    fn init_params(&self, rng: &mut ChaCha8Rng) -> Self::Params;

    /// Encodes `<sos> tokens <eos>` into an `(N + 2) x d` matrix.
    fn forward(&self, params: &Self::Params, tokens: &[String]) -> (Array2<f64>, Self::Cache);

    /// Accumulates into `grads` given `dJ/dH` for the output of `forward`.
    fn backward(&self, params: &Self::Params, cache: &Self::Cache, grad_h: ArrayView2<f64>, grads: &mut Self::Params);
}

/// Uniform in `[-sqrt(3/fan), +sqrt(3/fan)]`.
fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, fan: usize) -> Array2<f64> {
    let bound = (3.0 / fan as f64).sqrt();
    Array2::from_shape_simple_fn((rows, fan), || rng.gen_range(-bound..=bound))
}

fn uniform_vec(rng: &mut ChaCha8Rng, fan: usize) -> Array1<f64> {
    let bound = (3.0 / fan as f64).sqrt();
    Array1::from_shape_simple_fn(fan, || rng.gen_range(-bound..=bound))
}

fn flat(a: &impl AsFlat) -> &[f64] {
    a.flat()
}

trait AsFlat {
    fn flat(&self) -> &[f64];
    fn flat_mut(&mut self) -> &mut [f64];
}

impl AsFlat for Array1<f64> {
    fn flat(&self) -> &[f64] {
        self.as_slice().expect("standard layout")
    }
    fn flat_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut().expect("standard layout")
    }
}

impl AsFlat for Array2<f64> {
    fn flat(&self) -> &[f64] {
        self.as_slice().expect("standard layout")
    }
    fn flat_mut(&mut self) -> &mut [f64] {
        self.as_slice_mut().expect("standard layout")
    }
}

/// `h_t = tanh(P [x_{t-r}; ...; x_{t+r}] + b)` over frozen pre-trained
/// vectors, where `x` is the padded sequence `<sos> e_1 .. e_N <eos>` and
/// positions past either end repeat the boundary vector. With radius `r = 0`
/// each position sees only its own word. Unknown words share a learned
/// vector; `<sos>` and `<eos>` have their own.
#[derive(Debug, Clone)]
pub struct StaticEncoder {
    table: Arc<EmbeddingTable>,
    hidden_dim: usize,
    radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticEncoderParams {
    /// `d x (2r + 1) e`
    pub proj: Array2<f64>,
    pub bias: Array1<f64>,
    pub unk: Array1<f64>,
    pub sos: Array1<f64>,
    pub eos: Array1<f64>,
}

impl ParamTensors for StaticEncoderParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            flat(&self.proj),
            flat(&self.bias),
            flat(&self.unk),
            flat(&self.sos),
            flat(&self.eos),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.proj.flat_mut(),
            self.bias.flat_mut(),
            self.unk.flat_mut(),
            self.sos.flat_mut(),
            self.eos.flat_mut(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    Row(usize),
    Unk,
    Sos,
    Eos,
}

#[derive(Debug, Clone)]
pub struct StaticCache {
    sources: Vec<Source>,
    h: Array2<f64>,
}

impl StaticEncoder {
    /// Context-free encoder (radius 0).
    pub fn new(table: Arc<EmbeddingTable>, hidden_dim: usize) -> Self {
        Self::with_radius(table, hidden_dim, 0)
    }

    pub fn with_radius(table: Arc<EmbeddingTable>, hidden_dim: usize, radius: usize) -> Self {
        assert!(hidden_dim > 0);
        StaticEncoder {
            table,
            hidden_dim,
            radius,
        }
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    pub fn input_dim(&self) -> usize {
        self.table.dim()
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    fn window_len(&self) -> usize {
        2 * self.radius + 1
    }

    fn input<'a>(&'a self, params: &'a StaticEncoderParams, src: Source) -> ArrayView1<'a, f64> {
        match src {
            Source::Row(r) => ArrayView1::from(self.table.row(r)),
            Source::Unk => params.unk.view(),
            Source::Sos => params.sos.view(),
            Source::Eos => params.eos.view(),
        }
    }

    /// Sources of the window around padded position `t`.
    fn window(&self, sources: &[Source], t: usize) -> Vec<Source> {
        let last = sources.len() - 1;
        let (lo, hi) = (t as isize - self.radius as isize, t + self.radius);
        let (first, end) = (sources[0], sources[last]);
        let inner: Vec<Source> = (lo..=hi as isize)
            .map(|k| {
                if k < 0 {
                    first
                } else if k as usize > last {
                    end
                } else {
                    sources[k as usize]
                }
            })
            .collect();
        inner
    }
}

impl Encoder for StaticEncoder {
    type Params = StaticEncoderParams;
    type Cache = StaticCache;

    fn output_dim(&self) -> usize {
        self.hidden_dim
    }

    fn init_params(&self, rng: &mut ChaCha8Rng) -> StaticEncoderParams {
        let e = self.input_dim();
        StaticEncoderParams {
            proj: uniform_init(rng, self.hidden_dim, self.window_len() * e),
            bias: Array1::zeros(self.hidden_dim),
            unk: uniform_vec(rng, e),
            sos: uniform_vec(rng, e),
            eos: uniform_vec(rng, e),
        }
    }

    fn forward(&self, params: &StaticEncoderParams, tokens: &[String]) -> (Array2<f64>, StaticCache) {
        let e = self.input_dim();
        let mut sources = Vec::with_capacity(tokens.len() + 2);
        sources.push(Source::Sos);
        sources.extend(
            tokens
                .iter()
                .map(|t| self.table.lookup(t).map_or(Source::Unk, Source::Row)),
        );
        sources.push(Source::Eos);

        let mut h = Array2::zeros((sources.len(), self.hidden_dim));
        for t in 0..sources.len() {
            let mut pre = params.bias.clone();
            for (k, &src) in self.window(&sources, t).iter().enumerate() {
                let block = params.proj.slice(s![.., k * e..(k + 1) * e]);
                pre += &block.dot(&self.input(params, src));
            }
            h.row_mut(t).assign(&pre.mapv(f64::tanh));
        }
        (h.clone(), StaticCache { sources, h })
    }

    fn backward(
        &self,
        params: &StaticEncoderParams,
        cache: &StaticCache,
        grad_h: ArrayView2<f64>,
        grads: &mut StaticEncoderParams,
    ) {
        let e = self.input_dim();
        for t in 0..cache.sources.len() {
            let h = cache.h.row(t);
            let dpre = &grad_h.row(t) * &h.mapv(|v| 1.0 - v * v);
            grads.bias += &dpre;
            for (k, &src) in self.window(&cache.sources, t).iter().enumerate() {
                let input = self.input(params, src);
                grads
                    .proj
                    .slice_mut(s![.., k * e..(k + 1) * e])
                    .scaled_add(1.0, &outer(dpre.view(), input));
                if matches!(src, Source::Row(_)) {
                    continue;
                }
                let dinput = params.proj.slice(s![.., k * e..(k + 1) * e]).t().dot(&dpre);
                match src {
                    Source::Row(_) => {}
                    Source::Unk => grads.unk += &dinput,
                    Source::Sos => grads.sos += &dinput,
                    Source::Eos => grads.eos += &dinput,
                }
            }
        }
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// All model parameters: encoder, shared attention projection, the three
/// attention queries, and the type embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanParams<P> {
    pub encoder: P,
    /// `k x d`, shared by the three parts.
    pub attn_proj: Array2<f64>,
    pub query_left: Array1<f64>,
    pub query_inner: Array1<f64>,
    pub query_right: Array1<f64>,
    /// `|L| x 3d`
    pub type_emb: Array2<f64>,
}

impl<P: ParamTensors> ParamTensors for SpanParams<P> {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.tensors();
        v.extend([
            flat(&self.attn_proj),
            flat(&self.query_left),
            flat(&self.query_inner),
            flat(&self.query_right),
            flat(&self.type_emb),
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.tensors_mut();
        v.extend([
            self.attn_proj.flat_mut(),
            self.query_left.flat_mut(),
            self.query_inner.flat_mut(),
            self.query_right.flat_mut(),
            self.type_emb.flat_mut(),
        ]);
        v
    }
}

impl<P> SpanParams<P> {
    /// Zero query vectors make every part pool uniformly.
    pub fn clear_queries(&mut self) {
        self.query_left.fill(0.0);
        self.query_inner.fill(0.0);
        self.query_right.fill(0.0);
    }

    fn query(&self, part: usize) -> &Array1<f64> {
        match part {
            0 => &self.query_left,
            1 => &self.query_inner,
            _ => &self.query_right,
        }
    }

    fn query_mut(&mut self, part: usize) -> &mut Array1<f64> {
        match part {
            0 => &mut self.query_left,
            1 => &mut self.query_inner,
            _ => &mut self.query_right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension `d` of the encoder output.
    pub hidden_dim: usize,
    /// Dimension `k` of the attention projection.
    pub attn_dim: usize,
    /// Maximum number of tokens `M` in a candidate span.
    pub max_span_len: usize,
    /// Words on each side that the encoder sees around a position.
    pub context_radius: usize,
    /// One attention projection `W` for all three parts. When false each
    /// part gets its own `k x d` block.
    pub shared_attention: bool,
}

impl ModelConfig {
    fn attn_rows(&self) -> usize {
        if self.shared_attention {
            self.attn_dim
        } else {
            3 * self.attn_dim
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            attn_dim: 32,
            max_span_len: 5,
            context_radius: 1,
            shared_attention: true,
        }
    }
}

/// An encoded sentence, shared by all of its spans.
#[derive(Debug, Clone)]
pub struct SentenceEncoding<C> {
    /// `(N + 2) x d`, row 0 is `<sos>`, row `N + 1` is `<eos>`.
    pub h: Array2<f64>,
    /// `tanh(W h_t)` per row, `(N + 2) x k`, or `(N + 2) x 3k` with one
    /// column block per part when the projection is not shared.
    pub u: Array2<f64>,
    cache: C,
}

impl<C> SentenceEncoding<C> {
    /// Number of real tokens.
    pub fn num_tokens(&self) -> usize {
        self.h.nrows() - 2
    }
}

/// Forward intermediates of one span.
#[derive(Debug, Clone)]
pub struct SpanForward {
    /// Padded row ranges of left context, inner content, right context.
    pub ranges: [(usize, usize); 3],
    /// Attention weights per part.
    pub attention: [Array1<f64>; 3],
    /// `3d` span representation.
    pub repr: Array1<f64>,
    pub logits: Array1<f64>,
    pub log_probs: Array1<f64>,
}

impl SpanForward {
    pub fn probs(&self) -> Array1<f64> {
        self.log_probs.mapv(f64::exp)
    }
}

pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

pub fn log_softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.mapv(|v| v - lse)
}

/// A span classifier over a pluggable encoder.
#[derive(Debug, Clone)]
pub struct SpanModel<E: Encoder> {
    pub encoder: E,
    pub params: SpanParams<E::Params>,
    pub types: TypeList,
    pub config: ModelConfig,
}

impl<E: Encoder> SpanModel<E> {
    pub fn new(encoder: E, types: TypeList, config: ModelConfig, seed: u64) -> Self {
        let d = encoder.output_dim();
        assert_eq!(d, config.hidden_dim, "encoder output dimension must match hidden_dim");
        let k = config.attn_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SpanParams {
            encoder: encoder.init_params(&mut rng),
            attn_proj: uniform_init(&mut rng, config.attn_rows(), d),
            query_left: uniform_vec(&mut rng, k),
            query_inner: uniform_vec(&mut rng, k),
            query_right: uniform_vec(&mut rng, k),
            type_emb: uniform_init(&mut rng, types.len(), 3 * d),
        };
        SpanModel {
            encoder,
            params,
            types,
            config,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn attn_cols(&self, part: usize) -> std::ops::Range<usize> {
        let k = self.config.attn_dim;
        if self.config.shared_attention {
            0..k
        } else {
            part * k..(part + 1) * k
        }
    }

    pub fn encode(&self, tokens: &[String]) -> SentenceEncoding<E::Cache> {
        let (h, cache) = self.encoder.forward(&self.params.encoder, tokens);
        let u = h.dot(&self.params.attn_proj.t()).mapv(f64::tanh);
        SentenceEncoding { h, u, cache }
    }

    fn check_span(&self, n_tokens: usize, span: SpanRef) -> Result<()> {
        span.check_within(n_tokens)?;
        if span.len() > self.config.max_span_len {
            return Err(Error::SpanTooLong {
                len: span.len(),
                max: self.config.max_span_len,
            });
        }
        Ok(())
    }

    /// Forward pass of one span. The span must lie within the sentence.
    pub fn span_forward<C>(&self, enc: &SentenceEncoding<C>, span: SpanRef) -> SpanForward {
        let n = enc.num_tokens();
        debug_assert!(span.end <= n);
        let d = self.hidden_dim();
        // Padded rows: left = 0..i, inner = i..=j, right = j+1..=n+1.
        let ranges = [(0, span.start), (span.start, span.end + 1), (span.end + 1, n + 2)];
        let mut repr = Array1::zeros(3 * d);
        let attention = std::array::from_fn(|part| {
            let (lo, hi) = ranges[part];
            let scores = enc.u.slice(s![lo..hi, self.attn_cols(part)]).dot(self.params.query(part));
            let a = softmax(scores.view());
            repr.slice_mut(s![part * d..(part + 1) * d])
                .assign(&enc.h.slice(s![lo..hi, ..]).t().dot(&a));
            a
        });
        let logits = self.params.type_emb.dot(&repr);
        let log_probs = log_softmax(logits.view());
        SpanForward {
            ranges,
            attention,
            repr,
            logits,
            log_probs,
        }
    }

    /// The `3d` representation `[m_lc; m_c; m_rc]` of a span.
    pub fn span_representation<C>(&self, enc: &SentenceEncoding<C>, span: SpanRef) -> Array1<f64> {
        self.span_forward(enc, span).repr
    }

    /// `p(l | m)` for a span representation.
    pub fn type_distribution(&self, repr: ArrayView1<f64>) -> Array1<f64> {
        softmax(self.params.type_emb.dot(&repr).view())
    }

    /// Type distribution of one span of a sentence.
    pub fn predict_span(&self, tokens: &[String], span: SpanRef) -> Result<Vec<f64>> {
        self.check_span(tokens.len(), span)?;
        let enc = self.encode(tokens);
        Ok(self.span_forward(&enc, span).probs().to_vec())
    }

    /// Weighted cross-entropy of a batch, without gradients.
    pub fn loss(&self, batch: &[(&[String], &[WeightedSpan])]) -> Result<f64> {
        let mut total = 0.0;
        for &(tokens, spans) in batch {
            let enc = self.encode(tokens);
            for ws in spans {
                self.check_span(tokens.len(), ws.span)?;
                let fwd = self.span_forward(&enc, ws.span);
                total -= weighted_log_likelihood(&ws.weights, &fwd.log_probs);
            }
        }
        Ok(total)
    }

    /// Weighted cross-entropy of a batch and its exact gradient.
    pub fn loss_and_grad(&self, batch: &[(&[String], &[WeightedSpan])]) -> Result<(f64, SpanParams<E::Params>)> {
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        for &(tokens, spans) in batch {
            if spans.is_empty() {
                continue;
            }
            for ws in spans {
                self.check_span(tokens.len(), ws.span)?;
                if ws.weights.len() != self.types.len() {
                    return Err(Error::Invalid(format!(
                        "span {} has {} weights for {} types",
                        ws.span,
                        ws.weights.len(),
                        self.types.len()
                    )));
                }
            }
            total += self.sentence_backward(tokens, spans, &mut grads);
        }
        if !total.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                batch: 0,
                loss: total,
            });
        }
        Ok((total, grads))
    }

    fn sentence_backward(&self, tokens: &[String], spans: &[WeightedSpan], grads: &mut SpanParams<E::Params>) -> f64 {
        let d = self.hidden_dim();
        let enc = self.encode(tokens);
        let mut dh = Array2::<f64>::zeros(enc.h.raw_dim());
        let mut du = Array2::<f64>::zeros(enc.u.raw_dim());
        let mut loss = 0.0;

        for ws in spans {
            let fwd = self.span_forward(&enc, ws.span);
            let w = ArrayView1::from(&ws.weights[..]);
            loss -= weighted_log_likelihood(&ws.weights, &fwd.log_probs);

            // d/dlogits of -sum_l w_l log softmax_l = (sum w) p - w
            let dlogits = fwd.probs() * w.sum() - w;
            grads.type_emb += &outer(dlogits.view(), fwd.repr.view());
            let drepr = self.params.type_emb.t().dot(&dlogits);

            for part in 0..3 {
                let (lo, hi) = fwd.ranges[part];
                let a = &fwd.attention[part];
                let dm = drepr.slice(s![part * d..(part + 1) * d]);
                let h = enc.h.slice(s![lo..hi, ..]);
                // m = H^T a
                dh.slice_mut(s![lo..hi, ..]).scaled_add(1.0, &outer(a.view(), dm));
                let da = h.dot(&dm);
                let ds = a * &(&da - a.dot(&da));
                // scores = U q
                let cols = self.attn_cols(part);
                let u = enc.u.slice(s![lo..hi, cols.clone()]);
                *grads.query_mut(part) += &u.t().dot(&ds);
                du.slice_mut(s![lo..hi, cols])
                    .scaled_add(1.0, &outer(ds.view(), self.params.query(part).view()));
            }
        }

        // u = tanh(h W^T)
        let dpre = du * enc.u.mapv(|v| 1.0 - v * v);
        grads.attn_proj += &dpre.t().dot(&enc.h);
        dh += &dpre.dot(&self.params.attn_proj);
        self.encoder
            .backward(&self.params.encoder, &enc.cache, dh.view(), &mut grads.encoder);
        loss
    }
}

fn weighted_log_likelihood(weights: &[f64], log_probs: &Array1<f64>) -> f64 {
    weights
        .iter()
        .zip(log_probs.iter())
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, lp)| w * lp)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    pub epochs: usize,
    pub tokens_per_batch: usize,
    pub seed: u64,
    /// Accepted for configuration compatibility; dropout is not applied.
    pub dropout: f64,
    /// Draw a fresh set of negative spans before every epoch instead of
    /// reusing the negatives stored with the training data.
    pub resample_negatives: bool,
    /// Negatives per positive when resampling.
    pub negative_ratio: f64,
    /// Epochs at the start of training during which attention pooling is
    /// held uniform (zero queries, frozen projection).
    pub attention_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            epochs: 50,
            tokens_per_batch: 1000,
            seed: 0,
            dropout: 0.0,
            resample_negatives: false,
            negative_ratio: 5.0,
            attention_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be non-negative and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("gradient clip norm must be positive");
        }
        if self.tokens_per_batch == 0 {
            return bad("tokens per batch must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.negative_ratio > 0.0 && self.negative_ratio.is_finite()) {
            return bad("negative ratio must be positive");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: ParamTensors>(params: &P, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<P: ParamTensors>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<P: ParamTensors>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Groups sentence indices, in the given order, into batches of at most
/// `budget` tokens (a single longer sentence forms its own batch).
pub fn token_batches(order: &[usize], lengths: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for &idx in order {
        let n = lengths[idx];
        if !current.is_empty() && tokens + n > budget {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(idx);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Training loss before the first update.
    pub initial_loss: f64,
    /// Training loss at the end of each epoch.
    pub train_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub steps: usize,
}

fn as_batch(corpus: &[AnnotatedSentence]) -> Vec<(Vec<String>, Vec<WeightedSpan>)> {
    corpus
        .iter()
        .map(|a| (a.sentence.tokens.clone(), a.training_spans().cloned().collect()))
        .collect()
}

fn batch_view<'a>(data: &'a [(Vec<String>, Vec<WeightedSpan>)], idx: &[usize]) -> Vec<(&'a [String], &'a [WeightedSpan])> {
    idx.iter().map(|&i| (&data[i].0[..], &data[i].1[..])).collect()
}

/// Trains `model` in place on positives and sampled negatives. Keeps the
/// parameters of the epoch with the lowest dev loss, or the lowest training
/// loss when no dev set is given.
pub fn train<E: Encoder>(
    model: &mut SpanModel<E>,
    train_set: &[AnnotatedSentence],
    dev_set: Option<&[AnnotatedSentence]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let data = as_batch(train_set);
    let usable: Vec<usize> = (0..data.len()).filter(|&i| !data[i].1.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("training set has no spans".into()));
    }
    let lengths: Vec<usize> = data.iter().map(|d| d.0.len()).collect();
    let dev = dev_set.map(as_batch);
    let full = batch_view(&data, &usable);
    let dev_loss = |m: &SpanModel<E>| -> Result<Option<f64>> {
        dev.as_ref()
            .map(|d| m.loss(&batch_view(d, &(0..d.len()).collect::<Vec<_>>())))
            .transpose()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.attention_warmup > 0 {
        model.params.clear_queries();
    }
    let mut adam = Adam::new(&model.params, cfg);
    let initial_loss = model.loss(&full)?;
    let mut best_score = dev_loss(model)?.unwrap_or(initial_loss);
    let mut best_params = model.params.clone();
    let mut report = TrainReport {
        initial_loss,
        train_losses: Vec::with_capacity(cfg.epochs),
        dev_losses: Vec::new(),
        best_epoch: 0,
        steps: 0,
    };

    let mut order = usable.clone();
    for epoch in 1..=cfg.epochs {
        let resampled;
        let epoch_data = if cfg.resample_negatives {
            let mut copy = train_set.to_vec();
            sample_training_spans(
                &mut copy,
                &model.types,
                model.config.max_span_len,
                cfg.negative_ratio,
                rng.gen(),
            )?;
            resampled = as_batch(&copy);
            order = (0..resampled.len()).filter(|&i| !resampled[i].1.is_empty()).collect();
            &resampled
        } else {
            &data
        };
        order.shuffle(&mut rng);
        let pooling_frozen = epoch <= cfg.attention_warmup;
        for (b, batch) in token_batches(&order, &lengths, cfg.tokens_per_batch).iter().enumerate() {
            let (loss, mut grads) = model.loss_and_grad(&batch_view(epoch_data, batch)).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { epoch, batch: b, loss },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            if pooling_frozen {
                grads.clear_queries();
                grads.attn_proj.fill(0.0);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.update(&mut model.params, &grads, cfg.learning_rate);
            report.steps += 1;
        }
        let train_loss = model.loss(&full)?;
        if !train_loss.is_finite() || !model.params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: usize::MAX,
                loss: train_loss,
            });
        }
        report.train_losses.push(train_loss);
        let score = match dev_loss(model)? {
            Some(d) => {
                report.dev_losses.push(d);
                d
            }
            None => train_loss,
        };
        if score < best_score {
            best_score = score;
            best_params = model.params.clone();
            report.best_epoch = epoch;
        }
    }
    model.params = best_params;
    Ok(report)
}

pub const CHECKPOINT_FORMAT: &str = "distner-span-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub types: Vec<String>,
    pub config: ModelConfig,
    pub embedding_dim: usize,
    pub case_fold: bool,
    pub params: SpanParams<StaticEncoderParams>,
}

impl SpanModel<StaticEncoder> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            types: self.types.labels().to_vec(),
            config: ModelConfig {
                context_radius: self.encoder.radius(),
                ..self.config
            },
            embedding_dim: self.encoder.input_dim(),
            case_fold: self.encoder.table().case_fold(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, table: Arc<EmbeddingTable>) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!("not a model checkpoint (format `{}`)", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.embedding_dim != table.dim() {
            return Err(Error::Invalid(format!(
                "checkpoint expects {}-dimensional embeddings, table has {}",
                ckpt.embedding_dim,
                table.dim()
            )));
        }
        let types = TypeList::from_labels(ckpt.types)?;
        let (d, k, e) = (ckpt.config.hidden_dim, ckpt.config.attn_dim, ckpt.embedding_dim);
        let p = &ckpt.params;
        let shapes_ok = p.encoder.proj.dim() == (d, (2 * ckpt.config.context_radius + 1) * e)
            && p.encoder.bias.len() == d
            && p.encoder.unk.len() == e
            && p.encoder.sos.len() == e
            && p.encoder.eos.len() == e
            && p.attn_proj.dim() == (ckpt.config.attn_rows(), d)
            && [&p.query_left, &p.query_inner, &p.query_right].iter().all(|q| q.len() == k)
            && p.type_emb.dim() == (types.len(), 3 * d);
        if !shapes_ok || !p.is_finite() {
            return Err(Error::Invalid("checkpoint tensors have inconsistent shapes or non-finite values".into()));
        }
        Ok(SpanModel {
            encoder: StaticEncoder::with_radius(table, d, ckpt.config.context_radius),
            params: ckpt.params,
            types,
            config: ckpt.config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &self.to_checkpoint())?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, table: Arc<EmbeddingTable>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        Self::from_checkpoint(ckpt, table)
    }
}
