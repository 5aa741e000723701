//! Typed dictionaries, headwords, and headword-based dictionary extension.
//!
//! Untyped phrases inherit the type(s) of dictionary entries whose headword is
//! frequent in the dictionary and close to the phrase's headword in embedding
//! space. Each extended entry carries that similarity `s`, which
//! [`annotation_weight`] later turns into a confidence weight.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TypeId, TypeList, DEFAULT_NONE_LABEL};
use crate::embedding::EmbeddingTable;
use crate::{Error, Result};

/// Words that end the head noun phrase of a mention.
pub const PREPOSITIONS: [&str; 9] = ["of", "in", "on", "for", "with", "to", "at", "by", "from"];

pub fn is_preposition(word: &str) -> bool {
    PREPOSITIONS.iter().any(|p| p.eq_ignore_ascii_case(word))
}

/// The last word before the first preposition, or the last word when there
/// is no preposition (or the phrase starts with one).
pub fn headword<S: AsRef<str>>(phrase: &[S]) -> Result<&str> {
    let last = phrase
        .last()
        .ok_or_else(|| Error::Invalid("cannot take the headword of an empty phrase".into()))?;
    match phrase.iter().position(|w| is_preposition(w.as_ref())) {
        Some(pos) if pos > 0 => Ok(phrase[pos - 1].as_ref()),
        _ => Ok(last.as_ref()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DictEntry {
    pub mention: Vec<String>,
    pub label: TypeId,
}

impl DictEntry {
    pub fn new<S: Into<String>>(mention: impl IntoIterator<Item = S>, label: TypeId) -> Self {
        DictEntry {
            mention: mention.into_iter().map(Into::into).collect(),
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtDictEntry {
    pub mention: Vec<String>,
    pub label: TypeId,
    /// Headword similarity; exactly 1 for entries of the original dictionary.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtConfig {
    /// Headword frequency threshold.
    pub tau1: usize,
    /// Headword similarity threshold.
    pub tau2: f64,
    pub theta1: f64,
    pub theta2: f64,
    /// Count must be strictly greater than `tau1` (otherwise `>=`).
    pub strict_frequency: bool,
}

impl Default for ExtConfig {
    fn default() -> Self {
        ExtConfig {
            tau1: 5,
            tau2: 0.4,
            theta1: 1.0,
            theta2: -0.5,
            strict_frequency: true,
        }
    }
}

impl ExtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau1 < 1 {
            return Err(Error::Config("tau1 must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau2) {
            return Err(Error::Config(format!("tau2 = {} is outside [-1, 1]", self.tau2)));
        }
        if !self.theta1.is_finite() || !self.theta2.is_finite() {
            return Err(Error::Config("theta1 and theta2 must be finite".into()));
        }
        Ok(())
    }

    fn frequent(&self, count: usize) -> bool {
        if self.strict_frequency {
            count > self.tau1
        } else {
            count >= self.tau1
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weight of an annotation whose dictionary entry has similarity `s`:
/// 1 for `s = 1`, `sigmoid(theta1 * s + theta2)` otherwise.
pub fn annotation_weight(s: f64, cfg: &ExtConfig) -> f64 {
    if s >= 1.0 {
        1.0
    } else {
        sigmoid(cfg.theta1 * s + cfg.theta2)
    }
}

/// Headwords counted once per dictionary entry that pass the frequency threshold.
pub fn frequent_headwords(dict: &[DictEntry], cfg: &ExtConfig) -> BTreeSet<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for entry in dict {
        if let Ok(hw) = headword(&entry.mention) {
            *counts.entry(hw).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| cfg.frequent(c))
        .map(|(h, _)| h.to_string())
        .collect()
}

/// Extends `dict` with typed `phrases`.
///
/// For each phrase, every dictionary entry whose headword is frequent and has
/// similarity at least `tau2` to the phrase headword is a candidate; the types
/// of the candidates reaching the maximum similarity are kept, all sharing
/// that similarity. Original entries are appended with similarity 1. A phrase
/// that is already a dictionary mention keeps only its original entries.
/// Output is sorted by mention, then type.
pub fn extend_dictionary<S: AsRef<str>>(
    dict: &[DictEntry],
    phrases: &[Vec<S>],
    cfg: &ExtConfig,
    emb: &EmbeddingTable,
) -> Vec<ExtDictEntry> {
    let frequent = frequent_headwords(dict, cfg);

    // Similarity only depends on the entry's headword, so candidates are
    // grouped by headword: one comparison per distinct frequent headword.
    let mut by_headword: BTreeMap<&str, BTreeSet<TypeId>> = BTreeMap::new();
    for entry in dict {
        if let Ok(hw) = headword(&entry.mention) {
            if frequent.contains(hw) {
                by_headword.entry(hw).or_default().insert(entry.label);
            }
        }
    }

    let originals: HashSet<&[String]> = dict.iter().map(|e| e.mention.as_slice()).collect();
    let mut best: BTreeMap<(Vec<String>, TypeId), f64> = BTreeMap::new();

    let mut seen_phrases: HashSet<Vec<String>> = HashSet::new();
    for phrase in phrases {
        let phrase: Vec<String> = phrase.iter().map(|w| w.as_ref().to_string()).collect();
        if phrase.is_empty() || originals.contains(phrase.as_slice()) || !seen_phrases.insert(phrase.clone()) {
            continue;
        }
        let Ok(hp) = headword(&phrase) else { continue };

        let mut s = 0.0;
        let mut types: BTreeSet<TypeId> = BTreeSet::new();
        for (&he, labels) in &by_headword {
            let Some(sim) = emb.cosine_sim(hp, he) else { continue };
            if sim < cfg.tau2 {
                continue;
            }
            if sim > s {
                s = sim;
                types = labels.clone();
            } else if sim == s {
                types.extend(labels.iter().copied());
            }
        }
        for t in types {
            let slot = best.entry((phrase.clone(), t)).or_insert(s);
            *slot = slot.max(s);
        }
    }

    for entry in dict {
        best.insert((entry.mention.clone(), entry.label), 1.0);
    }

    best.into_iter()
        .map(|((mention, label), similarity)| ExtDictEntry {
            mention,
            label,
            similarity,
        })
        .collect()
}

/// Sorted distinct names with the none type appended.
pub fn infer_type_list<I, S>(names: I) -> Result<TypeList>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let set: BTreeSet<String> = names
        .into_iter()
        .map(|s| s.as_ref().to_string())
        .filter(|s| s != DEFAULT_NONE_LABEL)
        .collect();
    TypeList::new(set, DEFAULT_NONE_LABEL)
}

fn split_tsv<'a>(line: &'a str, fields: usize, path: &Path, lineno: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
    if parts.len() != fields {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected {fields} tab-separated fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn tokens(mention: &str, path: &Path, lineno: usize) -> Result<Vec<String>> {
    let toks: Vec<String> = mention.split_whitespace().map(str::to_string).collect();
    if toks.is_empty() {
        return Err(Error::parse(path, lineno, "empty mention"));
    }
    Ok(toks)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((idx + 1, line));
        }
    }
    Ok(out)
}

/// Reads a `mention<TAB>type` dictionary. Without `types`, the type list is
/// inferred from the file.
pub fn load_dictionary(path: impl AsRef<Path>, types: Option<&TypeList>) -> Result<(TypeList, Vec<DictEntry>)> {
    let path = path.as_ref();
    let rows = read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let parts = split_tsv(&line, 2, path, lineno)?;
            Ok((lineno, tokens(parts[0], path, lineno)?, parts[1].trim().to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let types = match types {
        Some(t) => t.clone(),
        None => infer_type_list(rows.iter().map(|r| r.2.as_str()))?,
    };
    let entries = rows
        .into_iter()
        .map(|(lineno, mention, label)| {
            let label = types
                .predefined_index(&label)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            Ok(DictEntry { mention, label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((types, entries))
}

/// One phrase per line, tokens separated by whitespace.
pub fn load_phrases(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path.as_ref())?
        .into_iter()
        .map(|(_, line)| line.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Formats a similarity with at least six decimals and no loss of precision.
pub fn format_similarity(s: f64) -> String {
    let fixed = format!("{s:.6}");
    if fixed.parse::<f64>() == Ok(s) {
        fixed
    } else {
        format!("{s}")
    }
}

pub fn write_extended(path: impl AsRef<Path>, entries: &[ExtDictEntry], types: &TypeList) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in entries {
        writeln!(
            out,
            "{}\t{}\t{}",
            e.mention.join(" "),
            types.name(e.label),
            format_similarity(e.similarity)
        )
        .map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `mention<TAB>type<TAB>s` extended dictionary.
pub fn load_extended(path: impl AsRef<Path>, types: Option<&TypeList>) -> Result<(TypeList, Vec<ExtDictEntry>)> {
    let path = path.as_ref();
    let rows = read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let parts = split_tsv(&line, 3, path, lineno)?;
            let s: f64 = parts[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad similarity `{}`", parts[2])))?;
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::parse(path, lineno, format!("similarity {s} is outside (0, 1]")));
            }
            Ok((lineno, tokens(parts[0], path, lineno)?, parts[1].trim().to_string(), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let types = match types {
        Some(t) => t.clone(),
        None => infer_type_list(rows.iter().map(|r| r.2.as_str()))?,
    };
    let entries = rows
        .into_iter()
        .map(|(lineno, mention, label, similarity)| {
            let label = types
                .predefined_index(&label)
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            Ok(ExtDictEntry {
                mention,
                label,
                similarity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((types, entries))
}
