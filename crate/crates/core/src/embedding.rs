//! Pre-trained word vectors in GloVe-style plain text.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    case_fold: bool,
    index: HashMap<String, usize>,
    words: Vec<String>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, case_fold: bool) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        EmbeddingTable {
            dim,
            case_fold,
            index: HashMap::new(),
            words: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Builds a table from `(word, vector)` pairs; duplicates keep the first vector.
    pub fn from_pairs<I, S>(dim: usize, case_fold: bool, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        let mut table = Self::new(dim, case_fold);
        for (line, (word, vector)) in pairs.into_iter().enumerate() {
            if vector.len() != dim {
                return Err(Error::Dimension {
                    line: line + 1,
                    expected: dim,
                    found: vector.len(),
                });
            }
            table.insert(word.as_ref(), &vector);
        }
        Ok(table)
    }

    fn key(&self, word: &str) -> String {
        if self.case_fold {
            word.to_lowercase()
        } else {
            word.to_string()
        }
    }

    /// Returns false if the (folded) word was already present.
    fn insert(&mut self, word: &str, vector: &[f64]) -> bool {
        debug_assert_eq!(vector.len(), self.dim);
        let key = self.key(word);
        if self.index.contains_key(&key) {
            return false;
        }
        self.index.insert(key.clone(), self.words.len());
        self.words.push(key);
        self.data.extend_from_slice(vector);
        true
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn case_fold(&self) -> bool {
        self.case_fold
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&self.key(word))
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        let row = *self.index.get(&self.key(word))?;
        Some(&self.data[row * self.dim..(row + 1) * self.dim])
    }

    /// Row index of a word, for callers that keep their own per-row state.
    pub fn lookup(&self, word: &str) -> Option<usize> {
        self.index.get(&self.key(word)).copied()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// Stored words in load order (folded if case folding is on).
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Cosine similarity of the two words' vectors. `None` if either word is
    /// missing or has a zero vector.
    pub fn cosine_sim(&self, a: &str, b: &str) -> Option<f64> {
        let va = self.get(a)?;
        let vb = self.get(b)?;
        cosine(va, vb)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Loads `word v1 v2 ... vd` rows, with an optional `count dim` header line.
pub fn load_embeddings(path: impl AsRef<Path>, case_fold: bool) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), path, case_fold)
}

pub fn read_embeddings<R: BufRead>(reader: R, origin: &Path, case_fold: bool) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    let mut values = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue;
        };
        let rest: Vec<&str> = fields.collect();

        if table.is_none() && rest.len() == 1 {
            if let (Ok(_count), Ok(dim)) = (word.parse::<usize>(), rest[0].parse::<usize>()) {
                if dim == 0 {
                    return Err(Error::parse(origin, lineno, "header declares dimension 0"));
                }
                table = Some(EmbeddingTable::new(dim, case_fold));
                continue;
            }
        }

        values.clear();
        for field in &rest {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(origin, lineno, format!("unparsable number `{field}`")))?;
            values.push(v);
        }
        let t = match table.as_mut() {
            Some(t) => t,
            None => {
                if values.is_empty() {
                    return Err(Error::parse(origin, lineno, "row has no vector"));
                }
                table.insert(EmbeddingTable::new(values.len(), case_fold))
            }
        };
        if values.len() != t.dim {
            return Err(Error::Dimension {
                line: lineno,
                expected: t.dim,
                found: values.len(),
            });
        }
        t.insert(word, &values);
    }
    table.ok_or_else(|| Error::parse(origin, 0, "no embedding rows"))
}
