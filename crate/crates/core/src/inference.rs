//! Candidate enumeration and the minimum-None partition.
//!
//! Every span of at most `M` tokens is scored; a dynamic program then picks
//! the segmentation of the sentence into disjoint, complete spans whose summed
//! `ln p(None)` is smallest, and each chosen span takes its most likely type.

use std::collections::BTreeMap;

use crate::corpus::{LabeledSpan, SpanRef, TypeId, TypeList};
use crate::model::{Encoder, SpanModel, PROB_FLOOR};
use crate::{Error, Result};

/// Number of spans with at most `max_len` tokens in an `n`-token sentence.
pub fn candidate_count(n: usize, max_len: usize) -> usize {
    let m = max_len.min(n);
    m * (2 * n - m + 1) / 2
}

/// Type distributions for every span of at most `max_len` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    n: usize,
    max_len: usize,
    rows: BTreeMap<SpanRef, Vec<f64>>,
}

impl CandidateSet {
    /// Builds a set by calling `score` on every legal span in `(start, end)`
    /// order.
    pub fn from_fn(n: usize, max_len: usize, mut score: impl FnMut(SpanRef) -> Vec<f64>) -> Self {
        assert!(max_len >= 1, "maximum span length must be at least 1");
        let max_len = max_len.min(n);
        let mut rows = BTreeMap::new();
        for i in 1..=n {
            for j in i..=(i + max_len - 1).min(n) {
                let span = SpanRef::new(i, j);
                rows.insert(span, score(span));
            }
        }
        CandidateSet { n, max_len, rows }
    }

    pub fn num_tokens(&self) -> usize {
        self.n
    }

    /// Effective maximum span length `min(M, N)`.
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, span: SpanRef) -> Option<&[f64]> {
        self.rows.get(&span).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (SpanRef, &[f64])> {
        self.rows.iter().map(|(s, p)| (*s, p.as_slice()))
    }
}

/// Scores every span of at most `max_len` tokens with one encoder pass.
pub fn generate_candidates<E: Encoder>(tokens: &[String], model: &SpanModel<E>, max_len: usize) -> CandidateSet {
    let enc = model.encode(tokens);
    CandidateSet::from_fn(tokens.len(), max_len, |span| model.span_forward(&enc, span).probs().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Disjoint spans covering `1..=N` in order.
    pub spans: Vec<SpanRef>,
    /// Sum of floored `ln p(None)` over `spans`.
    pub objective: f64,
    /// Inner-loop evaluations performed.
    pub iterations: usize,
    /// `r[0..=N]`, the best objective of each prefix.
    pub prefix: Vec<f64>,
}

/// Inner-loop evaluations of [`dp_partition`] for `n` tokens and effective
/// maximum span length `m`; equal to [`candidate_count`].
pub fn dp_iterations(n: usize, m: usize) -> usize {
    candidate_count(n, m)
}

/// Minimum-None segmentation. Among equal objectives the longest final span
/// is preferred.
pub fn dp_partition(cands: &CandidateSet, none: TypeId) -> Partition {
    let n = cands.num_tokens();
    let m = cands.max_len();
    let mut r = vec![0.0; n + 1];
    let mut parent = vec![0usize; n + 1];
    let mut iterations = 0;
    for j in 1..=n {
        let mut best = f64::INFINITY;
        let mut arg = j;
        for i in j.saturating_sub(m - 1).max(1)..=j {
            iterations += 1;
            let p = cands.get(SpanRef::new(i, j)).expect("candidate set is complete")[none];
            let v = r[i - 1] + p.max(PROB_FLOOR).ln();
            if v < best {
                best = v;
                arg = i;
            }
        }
        r[j] = best;
        parent[j] = arg;
    }

    let mut spans = Vec::new();
    let mut j = n;
    while j > 0 {
        let i = parent[j];
        spans.push(SpanRef::new(i, j));
        j = i - 1;
    }
    spans.reverse();
    Partition {
        spans,
        objective: r[n],
        iterations,
        prefix: r,
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = k;
        }
    }
    best
}

/// Assigns each partition span its most probable type and drops spans whose
/// most probable type is None.
pub fn label_spans(partition: &Partition, cands: &CandidateSet, types: &TypeList) -> Result<Vec<LabeledSpan>> {
    let mut out = Vec::new();
    for &span in &partition.spans {
        let p = cands
            .get(span)
            .ok_or_else(|| Error::Invalid(format!("partition span {span} has no candidate row")))?;
        let label = argmax(p);
        if !types.is_none(label) {
            out.push(LabeledSpan { span, label });
        }
    }
    Ok(out)
}

/// Typed, non-overlapping mentions of one sentence, sorted by start.
pub fn predict_sentence<E: Encoder>(tokens: &[String], model: &SpanModel<E>, max_len: usize) -> Result<Vec<LabeledSpan>> {
    if max_len == 0 {
        return Err(Error::Config("maximum span length must be at least 1".into()));
    }
    if max_len > model.config.max_span_len {
        return Err(Error::SpanTooLong {
            len: max_len,
            max: model.config.max_span_len,
        });
    }
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let cands = generate_candidates(tokens, model, max_len);
    let partition = dp_partition(&cands, model.types.none());
    label_spans(&partition, &cands, &model.types)
}
