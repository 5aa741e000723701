//! Generated toy corpora with planted mentions.
//!
//! Each type has a cluster of headwords in embedding space. Some headwords
//! ("core") appear in the dictionary, others ("variant") only occur in text
//! and in the phrase list, so the base dictionary misses them while the
//! headword extension can recover them through embedding similarity.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_predictions_to, LabeledSpan, Sentence, TypeId, TypeList};
use crate::embedding::EmbeddingTable;
use crate::lexicon::DictEntry;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub type_names: Vec<String>,
    pub train_sentences: usize,
    pub test_sentences: usize,
    pub embedding_dim: usize,
    pub core_heads: usize,
    pub variant_heads: usize,
    /// Modifier pool size, per type unless `shared_modifiers` is set.
    pub modifiers: usize,
    /// Draw modifiers of every type from one type-neutral pool.
    pub shared_modifiers: bool,
    pub fillers: usize,
    pub forms_per_type: usize,
    /// Fraction of all surface forms placed in the dictionary.
    pub dict_coverage: f64,
    pub noise_phrases: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub max_mentions: usize,
    /// Norm of the noise added to a type's center to make a headword.
    pub head_spread: f64,
    /// Same for modifiers and filler words around their own centers.
    pub word_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            type_names: vec!["Disease".into(), "Chemical".into()],
            train_sentences: 500,
            test_sentences: 100,
            embedding_dim: 24,
            core_heads: 6,
            variant_heads: 2,
            modifiers: 30,
            shared_modifiers: false,
            fillers: 200,
            forms_per_type: 150,
            dict_coverage: 0.6,
            noise_phrases: 100,
            min_sentence_len: 8,
            max_sentence_len: 20,
            max_mentions: 2,
            head_spread: 0.5,
            word_spread: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.type_names.is_empty() {
            return bad("at least one entity type is required");
        }
        if self.core_heads == 0 || self.modifiers < 2 || self.fillers < 2 {
            return bad("need at least one core headword, two modifiers and two filler words");
        }
        if !(0.0..=1.0).contains(&self.dict_coverage) {
            return bad("dictionary coverage must lie in [0, 1]");
        }
        let core_forms = self.core_heads * (1 + self.modifiers + self.modifiers * (self.modifiers - 1));
        if self.forms_per_type > core_forms {
            return bad("too many forms per type for the modifier pool");
        }
        if self.max_mentions == 0 || self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return bad("need at least one mention per sentence and ordered, positive length bounds");
        }
        if self.embedding_dim < 2 {
            return bad("embedding dimension must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SurfaceForm {
    pub tokens: Vec<String>,
    pub label: TypeId,
    /// Headword is a variant that never appears in the dictionary.
    pub variant: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub types: TypeList,
    pub embeddings: EmbeddingTable,
    pub dictionary: Vec<DictEntry>,
    pub phrases: Vec<Vec<String>>,
    pub forms: Vec<SurfaceForm>,
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalized(v)
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn near(rng: &mut ChaCha8Rng, center: &[f64], spread: f64) -> Vec<f64> {
    let noise = gaussian_unit(rng, center.len());
    normalized(center.iter().zip(noise).map(|(c, e)| c + spread * e).collect())
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let types = TypeList::new(cfg.type_names.iter().cloned(), crate::corpus::DEFAULT_NONE_LABEL)?;
    let dim = cfg.embedding_dim;
    let mut pairs: Vec<(String, Vec<f64>)> = Vec::new();

    let mut groups: Vec<Vec<String>> = vec![(0..cfg.fillers).map(|k| format!("w{k}")).collect()];
    if cfg.shared_modifiers {
        groups.push((0..cfg.modifiers).map(|k| format!("mod{k}")).collect());
    } else {
        for name in types.predefined() {
            let stem = name.to_lowercase();
            groups.push((0..cfg.modifiers).map(|k| format!("{stem}mod{k}")).collect());
        }
    }
    for group in &groups {
        let center = gaussian_unit(&mut rng, dim);
        for w in group {
            pairs.push((w.clone(), near(&mut rng, &center, cfg.word_spread)));
        }
    }
    let fillers = groups[0].clone();

    let mut forms = Vec::new();
    for (label, name) in types.predefined().iter().enumerate() {
        let center = gaussian_unit(&mut rng, dim);
        let stem = name.to_lowercase();
        let modifiers = if cfg.shared_modifiers { &groups[1] } else { &groups[1 + label] };
        let mut heads = Vec::new();
        for k in 0..cfg.core_heads {
            heads.push((format!("{stem}{k}"), false));
        }
        for k in 0..cfg.variant_heads {
            heads.push((format!("{stem}v{k}"), true));
        }
        for (h, _) in &heads {
            pairs.push((h.clone(), near(&mut rng, &center, cfg.head_spread)));
        }

        let mut seen = BTreeSet::new();
        while seen.len() < cfg.forms_per_type {
            let (head, variant) = heads.choose(&mut rng).unwrap().clone();
            let n_mods = rng.gen_range(0..=2);
            let mut tokens: Vec<String> = modifiers.choose_multiple(&mut rng, n_mods).cloned().collect();
            tokens.push(head);
            if seen.insert(tokens.clone()) {
                forms.push(SurfaceForm { tokens, label, variant });
            }
        }
    }

    let total = forms.len();
    let want = (cfg.dict_coverage * total as f64).round() as usize;
    let mut core: Vec<&SurfaceForm> = forms.iter().filter(|f| !f.variant).collect();
    core.shuffle(&mut rng);
    if want > core.len() {
        return Err(Error::Config(format!(
            "dictionary coverage needs {want} forms but only {} use core headwords",
            core.len()
        )));
    }
    let mut dictionary: Vec<DictEntry> = core[..want]
        .iter()
        .map(|f| DictEntry {
            mention: f.tokens.clone(),
            label: f.label,
        })
        .collect();
    dictionary.sort_by(|a, b| (&a.mention, a.label).cmp(&(&b.mention, b.label)));

    let mut phrases: BTreeSet<Vec<String>> = forms.iter().map(|f| f.tokens.clone()).collect();
    while phrases.len() < total + cfg.noise_phrases {
        let n = rng.gen_range(2..=3);
        let p: Vec<String> = (0..n).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
        phrases.insert(p);
    }

    let sentence = |rng: &mut ChaCha8Rng, idx: usize, prefix: &str| -> Result<Sentence> {
        let len = rng.gen_range(cfg.min_sentence_len..=cfg.max_sentence_len);
        let k = rng.gen_range(1..=cfg.max_mentions.max(1));
        let chosen: Vec<&SurfaceForm> = (0..k).map(|_| forms.choose(rng).unwrap()).collect();
        let used: usize = chosen.iter().map(|f| f.tokens.len()).sum();
        let n_fill = len.max(used + k + 1) - used;
        // gaps before, between (at least one filler) and after the mentions
        let mut gaps = vec![0usize; k + 1];
        for g in gaps.iter_mut().take(k).skip(1) {
            *g = 1;
        }
        for _ in 0..(n_fill - (k - 1)) {
            gaps[rng.gen_range(0..=k)] += 1;
        }
        let mut tokens = Vec::with_capacity(len);
        let mut gold = Vec::with_capacity(k);
        for (m, form) in chosen.iter().enumerate() {
            for _ in 0..gaps[m] {
                tokens.push(fillers.choose(rng).unwrap().clone());
            }
            let start = tokens.len() + 1;
            tokens.extend(form.tokens.iter().cloned());
            gold.push(LabeledSpan::new(start, tokens.len(), form.label));
        }
        for _ in 0..gaps[k] {
            tokens.push(fillers.choose(rng).unwrap().clone());
        }
        let mut s = Sentence::new(tokens).with_gold(gold, &types)?;
        s.doc_id = format!("{prefix}-{idx}");
        Ok(s)
    };
    let train = (0..cfg.train_sentences)
        .map(|i| sentence(&mut rng, i, "train"))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_sentences)
        .map(|i| sentence(&mut rng, i, "test"))
        .collect::<Result<Vec<_>>>()?;

    let embeddings = EmbeddingTable::from_pairs(dim, false, pairs)?;
    Ok(SyntheticData {
        types,
        embeddings,
        dictionary,
        phrases: phrases.into_iter().collect(),
        forms,
        train,
        test,
    })
}

/// Paths written by [`SyntheticData::write_to_dir`].
#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub dictionary: PathBuf,
    pub phrases: PathBuf,
    pub embeddings: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl SyntheticData {
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<SyntheticFiles> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SyntheticFiles {
            dictionary: dir.join("dict.tsv"),
            phrases: dir.join("phrases.txt"),
            embeddings: dir.join("emb.txt"),
            train: dir.join("train.jsonl"),
            test: dir.join("test.jsonl"),
        };

        let mut out = create(&files.dictionary)?;
        for e in &self.dictionary {
            writeln!(out, "{}\t{}", e.mention.join(" "), self.types.name(e.label))
                .map_err(|err| Error::io(&files.dictionary, err))?;
        }
        out.flush().map_err(|e| Error::io(&files.dictionary, e))?;

        let mut out = create(&files.phrases)?;
        for p in &self.phrases {
            writeln!(out, "{}", p.join(" ")).map_err(|e| Error::io(&files.phrases, e))?;
        }
        out.flush().map_err(|e| Error::io(&files.phrases, e))?;

        let mut out = create(&files.embeddings)?;
        for (row, w) in self.embeddings.words().iter().enumerate() {
            let v: Vec<String> = self.embeddings.row(row).iter().map(|x| format!("{x:.6}")).collect();
            writeln!(out, "{w} {}", v.join(" ")).map_err(|e| Error::io(&files.embeddings, e))?;
        }
        out.flush().map_err(|e| Error::io(&files.embeddings, e))?;

        for (path, split) in [(&files.train, &self.train), (&files.test, &self.test)] {
            let gold: Vec<Vec<LabeledSpan>> = split.iter().map(|s| s.gold.clone().unwrap_or_default()).collect();
            let mut out = create(path)?;
            write_predictions_to(&mut out, split, &gold, &self.types)?;
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(files)
    }
}
