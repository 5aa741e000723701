//! Sentences, spans, type lists, and the JSONL / CoNLL corpus formats.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Index into a [`TypeList`].
pub type TypeId = usize;

pub const DEFAULT_NONE_LABEL: &str = "None";

/// Ordered entity types. The none type is always the last label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeList {
    labels: Vec<String>,
}

impl TypeList {
    pub fn new<I, S>(predefined: I, none: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut labels: Vec<String> = predefined.into_iter().map(Into::into).collect();
        labels.push(none.into());
        Self::from_labels(labels)
    }

    /// Builds a list whose last element is taken as the none type.
    pub fn from_labels(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidTypeList(format!(
                "need at least one pre-defined type plus the none type, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() || label.chars().any(char::is_whitespace) {
                return Err(Error::InvalidTypeList(format!(
                    "type name `{label}` must be non-empty and contain no whitespace"
                )));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidTypeList(format!("duplicate type `{label}`")));
            }
        }
        Ok(TypeList { labels })
    }

    /// Number of labels including the none type.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_predefined(&self) -> usize {
        self.labels.len() - 1
    }

    pub fn none(&self) -> TypeId {
        self.labels.len() - 1
    }

    pub fn is_none(&self, id: TypeId) -> bool {
        id == self.none()
    }

    pub fn name(&self, id: TypeId) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn predefined(&self) -> &[String] {
        &self.labels[..self.none()]
    }

    pub fn index_of(&self, name: &str) -> Option<TypeId> {
        self.labels.iter().position(|l| l == name)
    }

    /// Looks up a pre-defined type; the none type and unknown names are errors.
    pub fn predefined_index(&self, name: &str) -> Result<TypeId> {
        match self.index_of(name) {
            Some(id) if !self.is_none(id) => Ok(id),
            Some(_) => Err(Error::Invalid(format!(
                "the none type `{name}` cannot label an entity mention"
            ))),
            None => Err(Error::UnknownType(name.to_string())),
        }
    }
}

/// Span boundaries `<start, end>`, 1-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanRef {
    pub start: usize,
    pub end: usize,
}

impl SpanRef {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start >= 1 && start <= end, "invalid span <{start},{end}>");
        SpanRef { start, end }
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &SpanRef) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn check_within(&self, n_tokens: usize) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.end > n_tokens {
            return Err(Error::SpanOutOfRange {
                start: self.start,
                end: self.end,
                len: n_tokens,
            });
        }
        Ok(())
    }

    /// Tokens covered by this span.
    pub fn slice<'a, T>(&self, tokens: &'a [T]) -> &'a [T] {
        &tokens[self.start - 1..self.end]
    }
}

impl fmt::Display for SpanRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.start, self.end)
    }
}

/// A span with a pre-defined type, used both for gold annotations and predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabeledSpan {
    pub span: SpanRef,
    pub label: TypeId,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize, label: TypeId) -> Self {
        LabeledSpan {
            span: SpanRef::new(start, end),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub doc_id: String,
    /// Gold mentions sorted by start, pairwise disjoint. `None` for raw text.
    pub gold: Option<Vec<LabeledSpan>>,
}

impl Sentence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Sentence {
            tokens: tokens.into_iter().map(Into::into).collect(),
            doc_id: String::new(),
            gold: None,
        }
    }

    /// Attaches gold spans after checking them against the sentence.
    pub fn with_gold(mut self, mut gold: Vec<LabeledSpan>, types: &TypeList) -> Result<Self> {
        validate_spans(&mut gold, self.tokens.len(), types)?;
        self.gold = Some(gold);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sorts `spans` by start and checks range, disjointness, and that no span
/// carries the none type.
pub fn validate_spans(spans: &mut [LabeledSpan], n_tokens: usize, types: &TypeList) -> Result<()> {
    spans.sort();
    for s in spans.iter() {
        s.span.check_within(n_tokens)?;
        if s.label >= types.len() {
            return Err(Error::UnknownType(format!("#{}", s.label)));
        }
        if types.is_none(s.label) {
            return Err(Error::Invalid(format!(
                "span {} is labeled with the none type",
                s.span
            )));
        }
    }
    for pair in spans.windows(2) {
        if pair[0].span.overlaps(&pair[1].span) {
            return Err(Error::OverlappingGold {
                first: (pair[0].span.start, pair[0].span.end),
                second: (pair[1].span.start, pair[1].span.end),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Conll,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "conll" | "bio" => Ok(CorpusFormat::Conll),
            other => Err(format!("unknown corpus format `{other}` (expected jsonl or conll)")),
        }
    }
}

#[derive(Deserialize)]
struct JsonSentence {
    tokens: Vec<String>,
    #[serde(default, alias = "spans")]
    gold: Option<Vec<(usize, usize, String)>>,
    #[serde(default)]
    doc_id: Option<String>,
}

#[derive(Serialize)]
struct JsonPrediction<'a> {
    #[serde(skip_serializing_if = "str::is_empty")]
    doc_id: &'a str,
    tokens: &'a [String],
    spans: Vec<(usize, usize, &'a str)>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat, types: &TypeList) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let reader = open(path)?;
    match format {
        CorpusFormat::Jsonl => read_jsonl(reader, path, types),
        CorpusFormat::Conll => read_conll(reader, path, types),
    }
}

/// Parses the JSONL corpus format. `origin` is only used in error messages.
pub fn read_jsonl<R: BufRead>(reader: R, origin: &Path, types: &TypeList) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonSentence =
            serde_json::from_str(&line).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        if record.tokens.is_empty() {
            return Err(Error::parse(origin, lineno, "sentence has no tokens"));
        }
        let mut sentence = Sentence::new(record.tokens);
        sentence.doc_id = record.doc_id.unwrap_or_default();
        if let Some(gold) = record.gold {
            let spans = gold
                .into_iter()
                .map(|(i, j, label)| {
                    let label = types.predefined_index(&label)?;
                    if i < 1 || i > j {
                        return Err(Error::SpanOutOfRange {
                            start: i,
                            end: j,
                            len: sentence.len(),
                        });
                    }
                    Ok(LabeledSpan::new(i, j, label))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            sentence = sentence
                .with_gold(spans, types)
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        }
        sentences.push(sentence);
    }
    Ok(sentences)
}

/// Parses CoNLL-style BIO: one `token ... tag` line per token, blank line
/// between sentences. The first column is the token, the last the tag.
pub fn read_conll<R: BufRead>(reader: R, origin: &Path, types: &TypeList) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut first_line = 0;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, lineno: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let spans = bio_to_spans(tags, types).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        let sentence = Sentence::new(std::mem::take(tokens))
            .with_gold(spans, types)
            .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        tags.clear();
        sentences.push(sentence);
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, first_line)?;
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(Error::parse(origin, lineno, "expected `token tag`"));
        }
        if tokens.is_empty() {
            first_line = lineno;
        }
        tokens.push(fields[0].to_string());
        tags.push(fields[fields.len() - 1].to_string());
    }
    flush(&mut tokens, &mut tags, first_line)?;
    Ok(sentences)
}

/// Converts BIO tags to spans. An `I-X` that does not continue an `X` span
/// opens a new one.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S], types: &TypeList) -> Result<Vec<LabeledSpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, TypeId)> = None;
    for (idx, tag) in tags.iter().enumerate() {
        let pos = idx + 1;
        let tag = tag.as_ref();
        let (prefix, label) = if tag == "O" {
            ("O", None)
        } else if let Some((p, l)) = tag.split_once('-') {
            (p, Some(types.predefined_index(l)?))
        } else {
            return Err(Error::Invalid(format!("malformed BIO tag `{tag}`")));
        };
        match (prefix, label) {
            ("O", _) => {
                if let Some((start, l)) = open.take() {
                    spans.push(LabeledSpan::new(start, pos - 1, l));
                }
            }
            ("B", Some(l)) => {
                if let Some((start, prev)) = open.take() {
                    spans.push(LabeledSpan::new(start, pos - 1, prev));
                }
                open = Some((pos, l));
            }
            ("I", Some(l)) => match open {
                Some((_, prev)) if prev == l => {}
                _ => {
                    if let Some((start, prev)) = open.take() {
                        spans.push(LabeledSpan::new(start, pos - 1, prev));
                    }
                    open = Some((pos, l));
                }
            },
            _ => return Err(Error::Invalid(format!("malformed BIO tag `{tag}`"))),
        }
    }
    if let Some((start, l)) = open {
        spans.push(LabeledSpan::new(start, tags.len(), l));
    }
    Ok(spans)
}

/// Converts non-overlapping spans to BIO tags over `n_tokens` tokens.
pub fn spans_to_bio(n_tokens: usize, spans: &[LabeledSpan], types: &TypeList) -> Vec<String> {
    let mut tags = vec!["O".to_string(); n_tokens];
    for s in spans {
        let name = types.name(s.label);
        tags[s.span.start - 1] = format!("B-{name}");
        for t in s.span.start + 1..=s.span.end {
            tags[t - 1] = format!("I-{name}");
        }
    }
    tags
}

/// Distinct gold type names in order of first appearance.
pub fn scan_type_names(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<String>> {
    let path = path.as_ref();
    let reader = open(path)?;
    let mut names: Vec<String> = Vec::new();
    let mut push = |name: &str| {
        if !names.iter().any(|n| n == name) {
            names.push(name.to_string());
        }
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match format {
            CorpusFormat::Jsonl => {
                let record: JsonSentence =
                    serde_json::from_str(&line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
                for (_, _, label) in record.gold.unwrap_or_default() {
                    push(&label);
                }
            }
            CorpusFormat::Conll => {
                if line.trim().starts_with("-DOCSTART-") {
                    continue;
                }
                if let Some(tag) = line.split_whitespace().last() {
                    if let Some((_, label)) = tag.split_once('-') {
                        push(label);
                    }
                }
            }
        }
    }
    Ok(names)
}

/// Writes one JSONL line per sentence with its predicted spans sorted by start.
pub fn write_predictions(
    sentences: &[Sentence],
    predictions: &[Vec<LabeledSpan>],
    types: &TypeList,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_predictions_to(&mut out, sentences, predictions, types).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions_to<W: Write>(
    out: &mut W,
    sentences: &[Sentence],
    predictions: &[Vec<LabeledSpan>],
    types: &TypeList,
) -> Result<()> {
    if sentences.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} sentences but {} prediction lists",
            sentences.len(),
            predictions.len()
        )));
    }
    for (sentence, preds) in sentences.iter().zip(predictions) {
        let mut sorted = preds.clone();
        sorted.sort();
        let record = JsonPrediction {
            doc_id: &sentence.doc_id,
            tokens: &sentence.tokens,
            spans: sorted
                .iter()
                .map(|p| (p.span.start, p.span.end, types.name(p.label)))
                .collect(),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}
