//! Entity-level exact-match scoring.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{LabeledSpan, Sentence, TypeList};
use crate::lexicon::DictEntry;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    pub fn gold(&self) -> usize {
        self.tp + self.fn_
    }

    /// `empty_precision` is reported when nothing was predicted.
    pub fn scores(&self, empty_precision: f64) -> Scores {
        let precision = if self.predicted() == 0 {
            empty_precision
        } else {
            self.tp as f64 / self.predicted() as f64
        };
        let recall = if self.gold() == 0 {
            0.0
        } else {
            self.tp as f64 / self.gold() as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores {
            precision,
            recall,
            f1,
            counts: *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetReports {
    pub in_dictionary: Scores,
    pub out_of_dictionary: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_type: BTreeMap<String, Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsets: Option<SubsetReports>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Report precision 1 instead of 0 when there are no predictions.
    pub empty_precision_one: bool,
}

impl EvalOptions {
    fn empty_precision(&self) -> f64 {
        if self.empty_precision_one {
            1.0
        } else {
            0.0
        }
    }
}

fn gold_of(sentence: &Sentence, idx: usize) -> Result<&[LabeledSpan]> {
    sentence
        .gold
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("gold sentence {} has no annotations", idx + 1)))
}

fn count_pairs<'a>(
    pairs: impl Iterator<Item = (&'a [LabeledSpan], &'a [LabeledSpan])>,
    types: &TypeList,
) -> (Counts, Vec<Counts>) {
    let mut total = Counts::default();
    let mut by_type = vec![Counts::default(); types.num_predefined()];
    for (pred, gold) in pairs {
        let gold_set: HashSet<&LabeledSpan> = gold.iter().collect();
        let pred_set: HashSet<&LabeledSpan> = pred.iter().collect();
        for p in &pred_set {
            let hit = gold_set.contains(p);
            let c = &mut by_type[p.label];
            if hit {
                c.tp += 1;
                total.tp += 1;
            } else {
                c.fp += 1;
                total.fp += 1;
            }
        }
        for g in &gold_set {
            if !pred_set.contains(g) {
                by_type[g.label].fn_ += 1;
                total.fn_ += 1;
            }
        }
    }
    (total, by_type)
}

fn check_aligned(preds: &[Vec<LabeledSpan>], gold: &[Sentence], types: &TypeList) -> Result<()> {
    if preds.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} predicted sentences but {} gold sentences",
            preds.len(),
            gold.len()
        )));
    }
    for (k, (p, g)) in preds.iter().zip(gold).enumerate() {
        gold_of(g, k)?;
        for s in p {
            s.span.check_within(g.len())?;
            if s.label >= types.num_predefined() {
                return Err(Error::Invalid(format!(
                    "prediction {} in sentence {} has a non-entity label",
                    s.span,
                    k + 1
                )));
            }
        }
    }
    Ok(())
}

/// Micro-averaged exact-match precision, recall and F1.
pub fn evaluate(preds: &[Vec<LabeledSpan>], gold: &[Sentence], types: &TypeList, opts: EvalOptions) -> Result<EvalReport> {
    check_aligned(preds, gold, types)?;
    let pairs = preds
        .iter()
        .zip(gold)
        .map(|(p, g)| (&p[..], g.gold.as_deref().unwrap_or_default()));
    Ok(report_from(count_pairs(pairs, types), types, opts))
}

fn report_from((total, by_type): (Counts, Vec<Counts>), types: &TypeList, opts: EvalOptions) -> EvalReport {
    let per_type = types
        .predefined()
        .iter()
        .zip(by_type)
        .map(|(name, c)| (name.clone(), c.scores(opts.empty_precision())))
        .collect();
    EvalReport {
        overall: total.scores(opts.empty_precision()),
        per_type,
        subsets: None,
    }
}

/// Decides whether a gold mention counts as appearing in the dictionary.
pub trait DictionaryMembership {
    fn is_in_dictionary(&self, mention: &[String]) -> bool;
}

/// A mention is in the dictionary if its whole token sequence is a
/// dictionary mention or any of its tokens occurs in some dictionary mention.
#[derive(Debug, Clone)]
pub struct TokenOverlap {
    mentions: HashSet<Vec<String>>,
    tokens: HashSet<String>,
    case_fold: bool,
}

impl TokenOverlap {
    pub fn new(dict: &[DictEntry], case_fold: bool) -> Self {
        let fold = |t: &String| if case_fold { t.to_lowercase() } else { t.clone() };
        let mentions = dict.iter().map(|e| e.mention.iter().map(fold).collect()).collect();
        let tokens = dict.iter().flat_map(|e| e.mention.iter().map(fold)).collect();
        TokenOverlap {
            mentions,
            tokens,
            case_fold,
        }
    }
}

impl DictionaryMembership for TokenOverlap {
    fn is_in_dictionary(&self, mention: &[String]) -> bool {
        let folded: Vec<String> = if self.case_fold {
            mention.iter().map(|t| t.to_lowercase()).collect()
        } else {
            mention.to_vec()
        };
        self.mentions.contains(&folded) || folded.iter().any(|t| self.tokens.contains(t))
    }
}

/// Per-sentence gold spans of one subset.
pub type SpanSets = Vec<Vec<LabeledSpan>>;

/// Splits gold mentions, per sentence, into in-dictionary and
/// out-of-dictionary sets.
pub fn id_ood_split(
    gold: &[Sentence],
    membership: &impl DictionaryMembership,
) -> Result<(SpanSets, SpanSets)> {
    let mut id = Vec::with_capacity(gold.len());
    let mut ood = Vec::with_capacity(gold.len());
    for (k, s) in gold.iter().enumerate() {
        let (a, b): (Vec<LabeledSpan>, Vec<LabeledSpan>) = gold_of(s, k)?
            .iter()
            .partition(|g| membership.is_in_dictionary(g.span.slice(&s.tokens)));
        id.push(a);
        ood.push(b);
    }
    Ok((id, ood))
}

/// Scores one gold subset against the predictions that overlap any of its
/// mentions.
fn subset_counts(preds: &[Vec<LabeledSpan>], subset: &[Vec<LabeledSpan>], types: &TypeList) -> (Counts, Vec<Counts>) {
    let filtered: Vec<Vec<LabeledSpan>> = preds
        .iter()
        .zip(subset)
        .map(|(p, g)| {
            p.iter()
                .filter(|s| g.iter().any(|x| x.span.overlaps(&s.span)))
                .copied()
                .collect()
        })
        .collect();
    count_pairs(filtered.iter().zip(subset).map(|(p, g)| (&p[..], &g[..])), types)
}

/// [`evaluate`] plus in-dictionary / out-of-dictionary breakdown.
pub fn evaluate_with_subsets(
    preds: &[Vec<LabeledSpan>],
    gold: &[Sentence],
    types: &TypeList,
    membership: &impl DictionaryMembership,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let mut report = evaluate(preds, gold, types, opts)?;
    let (id, ood) = id_ood_split(gold, membership)?;
    let ep = opts.empty_precision();
    report.subsets = Some(SubsetReports {
        in_dictionary: subset_counts(preds, &id, types).0.scores(ep),
        out_of_dictionary: subset_counts(preds, &ood, types).0.scores(ep),
    });
    Ok(report)
}

/// Aligned plain-text table of a report.
pub fn format_report(report: &EvalReport) -> String {
    let mut rows: Vec<(String, Scores)> = report.per_type.iter().map(|(k, v)| (k.clone(), *v)).collect();
    rows.push(("micro".to_string(), report.overall));
    if let Some(sub) = &report.subsets {
        rows.push(("in-dict".to_string(), sub.in_dictionary));
        rows.push(("out-of-dict".to_string(), sub.out_of_dictionary));
    }
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>6}  {:>6}",
        "type", "precision", "recall", "f1", "tp", "fp", "fn"
    );
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>6}  {:>6}  {:>6}",
            name, s.precision, s.recall, s.f1, s.counts.tp, s.counts.fp, s.counts.fn_
        );
    }
    out
}
