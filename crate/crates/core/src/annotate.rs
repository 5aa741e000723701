//! Weighted pseudo-annotation with an extended dictionary, and negative sampling.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{validate_spans, LabeledSpan, Sentence, SpanRef, TypeId, TypeList};
use crate::lexicon::{annotation_weight, headword, ExtConfig, ExtDictEntry};
use crate::{Error, Result};

/// A span with one weight per type, none type last.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSpan {
    pub span: SpanRef,
    pub weights: Vec<f64>,
}

impl WeightedSpan {
    /// A non-entity span: weight 1 on the none type, 0 elsewhere.
    pub fn negative(span: SpanRef, types: &TypeList) -> Self {
        let mut weights = vec![0.0; types.len()];
        weights[types.none()] = 1.0;
        WeightedSpan { span, weights }
    }

    pub fn is_negative(&self) -> bool {
        let (none, rest) = self.weights.split_last().expect("weights are never empty");
        *none == 1.0 && rest.iter().all(|&w| w == 0.0)
    }

    /// Checks the positive/negative weight-vector shapes.
    pub fn validate(&self, types: &TypeList) -> Result<()> {
        if self.weights.len() != types.len() {
            return Err(Error::Invalid(format!(
                "span {} has {} weights for {} types",
                self.span,
                self.weights.len(),
                types.len()
            )));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Invalid(format!("span {} has a weight outside [0, 1]", self.span)));
        }
        let (none, rest) = self.weights.split_last().unwrap();
        let positive = *none == 0.0 && rest.iter().any(|&w| w > 0.0);
        if !positive && !self.is_negative() {
            return Err(Error::Invalid(format!(
                "span {} is neither a positive nor a negative sample",
                self.span
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSentence {
    pub sentence: Sentence,
    /// Pairwise disjoint, sorted by start.
    pub positives: Vec<WeightedSpan>,
    /// Filled by [`sample_training_spans`].
    pub negatives: Vec<WeightedSpan>,
}

impl AnnotatedSentence {
    pub fn new(sentence: Sentence, positives: Vec<WeightedSpan>) -> Self {
        AnnotatedSentence {
            sentence,
            positives,
            negatives: Vec::new(),
        }
    }

    /// Positives followed by negatives.
    pub fn training_spans(&self) -> impl Iterator<Item = &WeightedSpan> {
        self.positives.iter().chain(&self.negatives)
    }
}

/// Exact token-sequence matcher over an extended dictionary.
#[derive(Debug, Clone)]
pub struct Annotator {
    types: TypeList,
    cfg: ExtConfig,
    case_fold: bool,
    mentions: HashMap<Vec<String>, Vec<(TypeId, f64)>>,
    /// Distinct mention lengths, longest first.
    lengths: Vec<usize>,
    /// `(headword, type)` pairs of original (similarity 1) entries.
    original_heads: HashSet<(String, TypeId)>,
}

impl Annotator {
    pub fn new(entries: &[ExtDictEntry], types: &TypeList, cfg: &ExtConfig, case_fold: bool) -> Self {
        let fold = |w: &str| if case_fold { w.to_lowercase() } else { w.to_string() };
        let mut mentions: HashMap<Vec<String>, Vec<(TypeId, f64)>> = HashMap::new();
        let mut original_heads = HashSet::new();
        for e in entries {
            if e.mention.is_empty() {
                continue;
            }
            let key: Vec<String> = e.mention.iter().map(|w| fold(w)).collect();
            if e.similarity >= 1.0 {
                let hw = headword(&key).expect("non-empty mention").to_string();
                original_heads.insert((hw, e.label));
            }
            let slot = mentions.entry(key).or_default();
            match slot.iter_mut().find(|(t, _)| *t == e.label) {
                Some((_, s)) => *s = s.max(e.similarity),
                None => slot.push((e.label, e.similarity)),
            }
        }
        let lengths: BTreeSet<usize> = mentions.keys().map(Vec::len).collect();
        Annotator {
            types: types.clone(),
            cfg: cfg.clone(),
            case_fold,
            mentions,
            lengths: lengths.into_iter().rev().collect(),
            original_heads,
        }
    }

    pub fn types(&self) -> &TypeList {
        &self.types
    }

    /// Greedy longest-first matching. Within one length, matches are claimed
    /// left to right; a match overlapping an already claimed span is skipped.
    pub fn annotate(&self, sentence: &Sentence) -> Vec<WeightedSpan> {
        let tokens: Vec<String> = sentence
            .tokens
            .iter()
            .map(|w| if self.case_fold { w.to_lowercase() } else { w.clone() })
            .collect();
        let n = tokens.len();
        let mut claimed = vec![false; n];
        let mut out = Vec::new();

        for &len in &self.lengths {
            if len > n {
                continue;
            }
            for start in 0..=n - len {
                let window = &tokens[start..start + len];
                let Some(labels) = self.mentions.get(window) else { continue };
                if claimed[start..start + len].iter().any(|&c| c) {
                    continue;
                }
                claimed[start..start + len].iter_mut().for_each(|c| *c = true);
                let hw = headword(window).expect("non-empty window");
                let mut weights = vec![0.0; self.types.len()];
                for &(label, s) in labels {
                    weights[label] = if self.original_heads.contains(&(hw.to_string(), label)) {
                        1.0
                    } else {
                        annotation_weight(s, &self.cfg)
                    };
                }
                out.push(WeightedSpan {
                    span: SpanRef::new(start + 1, start + len),
                    weights,
                });
            }
        }
        out.sort_by_key(|w| w.span);
        out
    }

    pub fn annotate_corpus(&self, sentences: &[Sentence]) -> Vec<AnnotatedSentence> {
        sentences
            .iter()
            .map(|s| AnnotatedSentence::new(s.clone(), self.annotate(s)))
            .collect()
    }
}

/// Replaces every sentence's negatives with a global uniform sample of
/// `round(ratio * #positives)` spans of at most `max_span_len` tokens that are
/// not themselves positive. Takes all candidates if there are too few.
pub fn sample_training_spans(
    annotated: &mut [AnnotatedSentence],
    types: &TypeList,
    max_span_len: usize,
    ratio: f64,
    seed: u64,
) -> Result<usize> {
    if max_span_len < 1 {
        return Err(Error::Config("maximum span length must be at least 1".into()));
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("negative ratio {ratio} must be positive")));
    }
    let n_positive: usize = annotated.iter().map(|a| a.positives.len()).sum();
    let mut pool: Vec<(usize, SpanRef)> = Vec::new();
    for (idx, a) in annotated.iter().enumerate() {
        let positive: HashSet<SpanRef> = a.positives.iter().map(|p| p.span).collect();
        let n = a.sentence.len();
        for start in 1..=n {
            for end in start..=n.min(start + max_span_len - 1) {
                let span = SpanRef::new(start, end);
                if !positive.contains(&span) {
                    pool.push((idx, span));
                }
            }
        }
    }

    let wanted = ((ratio * n_positive as f64).round() as usize).min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, pool.len(), wanted).into_vec();
    picked.sort_unstable();

    for a in annotated.iter_mut() {
        a.negatives.clear();
    }
    for idx in picked {
        let (sentence, span) = pool[idx];
        annotated[sentence].negatives.push(WeightedSpan::negative(span, types));
    }
    Ok(wanted)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnnotationQuality {
    pub precision: f64,
    pub recall: f64,
    pub correct: usize,
    pub annotated: usize,
    pub gold: usize,
}

/// Exact-span precision/recall of positive annotations against gold. A
/// multi-type annotation is correct if the gold type has positive weight.
/// With no annotations precision is 1; with no gold mentions recall is 1.
pub fn annotation_quality(annotated: &[AnnotatedSentence], gold: &[Sentence]) -> Result<AnnotationQuality> {
    if annotated.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} annotated sentences but {} gold sentences",
            annotated.len(),
            gold.len()
        )));
    }
    let (mut correct, mut n_annotated, mut n_gold) = (0, 0, 0);
    for (idx, (a, g)) in annotated.iter().zip(gold).enumerate() {
        let gold_spans = g
            .gold
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("gold sentence {} has no annotations", idx + 1)))?;
        if a.sentence.tokens != g.tokens {
            return Err(Error::Invalid(format!(
                "sentence {} differs between annotated and gold corpora",
                idx + 1
            )));
        }
        let by_span: HashMap<SpanRef, TypeId> = gold_spans.iter().map(|s| (s.span, s.label)).collect();
        n_gold += gold_spans.len();
        n_annotated += a.positives.len();
        correct += a
            .positives
            .iter()
            .filter(|p| by_span.get(&p.span).is_some_and(|&l| p.weights[l] > 0.0))
            .count();
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(AnnotationQuality {
        precision: ratio(correct, n_annotated),
        recall: ratio(correct, n_gold),
        correct,
        annotated: n_annotated,
        gold: n_gold,
    })
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    types: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    doc_id: String,
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Vec<(usize, usize, String)>>,
    positives: Vec<(usize, usize, Vec<f64>)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    negatives: Option<Vec<(usize, usize)>>,
}

/// Writes the annotated-corpus cache: a `{"types": [...]}` header line, then
/// one `{"tokens", "positives": [[i, j, [w...]]], "negatives"?: [[i, j]]}`
/// line per sentence.
pub fn write_annotated(
    path: impl AsRef<Path>,
    types: &TypeList,
    annotated: &[AnnotatedSentence],
    with_negatives: bool,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(
        &mut out,
        &CacheHeader {
            types: types.labels().to_vec(),
        },
    )?;
    out.write_all(b"\n").map_err(io)?;
    for a in annotated {
        let line = CacheLine {
            doc_id: a.sentence.doc_id.clone(),
            tokens: a.sentence.tokens.clone(),
            gold: a.sentence.gold.as_ref().map(|g| {
                g.iter()
                    .map(|s| (s.span.start, s.span.end, types.name(s.label).to_string()))
                    .collect()
            }),
            positives: a
                .positives
                .iter()
                .map(|p| (p.span.start, p.span.end, p.weights.clone()))
                .collect(),
            negatives: with_negatives.then(|| a.negatives.iter().map(|n| (n.span.start, n.span.end)).collect()),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Debug, Clone)]
pub struct AnnotatedCorpus {
    pub types: TypeList,
    pub sentences: Vec<AnnotatedSentence>,
    /// Whether the cache carried sampled negatives.
    pub sampled: bool,
}

pub fn load_annotated(path: impl AsRef<Path>) -> Result<AnnotatedCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut types: Option<TypeList> = None;
    let mut sentences = Vec::new();
    let mut sampled = false;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::parse(path, lineno, msg);
        let Some(types) = types.as_ref() else {
            let header: CacheHeader = serde_json::from_str(&line)
                .map_err(|e| perr(format!("expected a {{\"types\": [...]}} header: {e}")))?;
            types = Some(TypeList::from_labels(header.types).map_err(|e| perr(e.to_string()))?);
            continue;
        };
        let record: CacheLine = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        if record.tokens.is_empty() {
            return Err(perr("sentence has no tokens".into()));
        }
        let n = record.tokens.len();
        let mut sentence = Sentence::new(record.tokens);
        sentence.doc_id = record.doc_id;
        if let Some(gold) = record.gold {
            let spans = gold
                .into_iter()
                .map(|(i, j, l)| {
                    checked_span(i, j, n)?;
                    Ok(LabeledSpan::new(i, j, types.predefined_index(&l)?))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| perr(e.to_string()))?;
            sentence = sentence.with_gold(spans, types).map_err(|e| perr(e.to_string()))?;
        }
        let mut positives = record
            .positives
            .into_iter()
            .map(|(i, j, weights)| {
                let w = WeightedSpan {
                    span: checked_span(i, j, n)?,
                    weights,
                };
                w.validate(types)?;
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| perr(e.to_string()))?;
        positives.sort_by_key(|p| p.span);
        let mut as_labeled: Vec<LabeledSpan> = positives.iter().map(|p| LabeledSpan { span: p.span, label: 0 }).collect();
        validate_spans(&mut as_labeled, n, types).map_err(|e| perr(format!("positives: {e}")))?;

        let negatives = match record.negatives {
            Some(neg) => {
                sampled = true;
                neg.into_iter()
                    .map(|(i, j)| Ok(WeightedSpan::negative(checked_span(i, j, n)?, types)))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| perr(e.to_string()))?
            }
            None => Vec::new(),
        };
        sentences.push(AnnotatedSentence {
            sentence,
            positives,
            negatives,
        });
    }
    let types = types.ok_or_else(|| Error::parse(path, 0, "missing {\"types\": [...]} header"))?;
    Ok(AnnotatedCorpus {
        types,
        sentences,
        sampled,
    })
}

fn checked_span(i: usize, j: usize, n: usize) -> Result<SpanRef> {
    if i < 1 || i > j || j > n {
        return Err(Error::SpanOutOfRange { start: i, end: j, len: n });
    }
    Ok(SpanRef::new(i, j))
}
