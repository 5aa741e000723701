//! Command-line entry point.
//!
//! Every subcommand resolves an effective configuration (defaults, then an
//! optional TOML file, then flags), validates it together with its input
//! paths, runs, and writes a JSON run manifest next to its main output.
//! Exit codes: 0 on success, 1 on invalid usage or configuration, 2 when the
//! run itself fails.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{annotation_quality, load_annotated, sample_training_spans, write_annotated, Annotator};
use crate::corpus::{load_corpus, scan_type_names, write_predictions, CorpusFormat, Sentence, TypeList};
use crate::embedding::load_embeddings;
use crate::eval::{evaluate, evaluate_with_subsets, format_report, EvalOptions, TokenOverlap};
use crate::inference::predict_sentence;
use crate::lexicon::{extend_dictionary, infer_type_list, load_dictionary, load_extended, load_phrases, write_extended, ExtConfig};
use crate::model::{train, ModelConfig, SpanModel, StaticEncoder, TrainConfig};
use crate::synthetic::{generate, SyntheticConfig};

#[derive(Debug, Parser)]
#[command(name = "distner", version, about = "Distantly supervised span-level named entity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the run manifest (defaults to `<output>.manifest.json`)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Top-level random seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TypeArgs {
    /// Comma-separated entity types; the none type is appended
    #[arg(long, value_delimiter = ',')]
    types: Option<Vec<String>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extend a typed dictionary with phrases whose headwords resemble frequent dictionary headwords
    ExtendDict {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        phrases: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau1: Option<usize>,
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        theta1: Option<f64>,
        #[arg(long)]
        theta2: Option<f64>,
        /// Count a headword as frequent when its count is at least tau1
        #[arg(long)]
        inclusive_frequency: bool,
        /// Look up embeddings case-sensitively
        #[arg(long)]
        no_case_fold: bool,
        #[command(flatten)]
        types: TypeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Pseudo-annotate a corpus with an extended dictionary
    Annotate {
        #[arg(long)]
        ext: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theta1: Option<f64>,
        #[arg(long)]
        theta2: Option<f64>,
        /// Match dictionary mentions case-insensitively
        #[arg(long)]
        case_fold: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sample negative spans for an annotated corpus
    Sample {
        #[arg(long)]
        annotated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Negatives per positive
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        max_span_len: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the span classifier on a sampled annotated corpus
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Sampled annotated corpus used for model selection
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Look up embeddings case-sensitively
        #[arg(long)]
        no_case_fold: bool,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        attn_dim: Option<usize>,
        #[arg(long)]
        max_span_len: Option<usize>,
        /// Words of context on each side seen by the encoder (0 = none)
        #[arg(long)]
        context_radius: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        tokens_per_batch: Option<usize>,
        #[arg(long)]
        clip: Option<f64>,
        /// Epochs of uniform attention pooling before the queries train
        #[arg(long)]
        attention_warmup: Option<usize>,
        /// Separate attention projection per context part
        #[arg(long)]
        per_part_attention: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Predict typed mentions for a corpus
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        out: PathBuf,
        /// Longest candidate span (defaults to the model's)
        #[arg(long)]
        max_span_len: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against gold mentions
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: CorpusFormat,
        /// Original dictionary, enables the in/out-of-dictionary breakdown
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Print the report as JSON
        #[arg(long)]
        json: bool,
        /// Also write the JSON report to this file
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report precision 1 when nothing is predicted
        #[arg(long)]
        empty_precision_one: bool,
        #[arg(long)]
        case_fold: bool,
        #[command(flatten)]
        types: TypeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Precision and recall of pseudo-annotations against gold mentions
    Quality {
        #[arg(long)]
        annotated: PathBuf,
        /// Gold corpus, if the annotated file carries no gold mentions
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write a generated toy corpus, dictionary, phrase list and embeddings
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Effective settings of a run; the TOML file uses the same layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub extension: ExtConfig,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub ratio: f64,
    pub max_span_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            ratio: 5.0,
            max_span_len: 5,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait UsageContext<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn runtime<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

#[derive(Debug, Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a PipelineConfig,
    inputs: BTreeMap<&'a str, FileRecord>,
    outputs: BTreeMap<&'a str, FileRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<serde_json::Value>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_record(path: &Path) -> anyhow::Result<FileRecord> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

fn config_hash(cfg: &PipelineConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

struct Run<'a> {
    command: &'a str,
    cfg: PipelineConfig,
    inputs: Vec<(&'a str, PathBuf)>,
    manifest: Option<PathBuf>,
}

impl<'a> Run<'a> {
    fn new(command: &'a str, common: &Common) -> Result<Self, Failure> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("cannot read config file {}", path.display()))
                    .usage()?;
                toml::from_str(&text)
                    .with_context(|| format!("invalid config file {}", path.display()))
                    .usage()?
            }
            None => PipelineConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        Ok(Run {
            command,
            cfg,
            inputs: Vec::new(),
            manifest: common.manifest.clone(),
        })
    }

    fn input(&mut self, name: &'a str, path: &Path) -> Result<(), Failure> {
        if !path.is_file() {
            return Err(Failure::Usage(anyhow::anyhow!(
                "input file {} (--{name}) does not exist",
                path.display()
            )));
        }
        self.inputs.push((name, path.to_path_buf()));
        Ok(())
    }

    fn finish(
        &self,
        outputs: &[(&'a str, &Path)],
        summary: Option<serde_json::Value>,
    ) -> anyhow::Result<()> {
        let target = match (&self.manifest, outputs.first()) {
            (Some(p), _) => p.clone(),
            (None, Some((_, out))) => {
                let mut name = out.as_os_str().to_owned();
                name.push(".manifest.json");
                PathBuf::from(name)
            }
            (None, None) => return Ok(()),
        };
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.cfg.seed,
            config_sha256: config_hash(&self.cfg),
            config: &self.cfg,
            inputs: self
                .inputs
                .iter()
                .map(|(k, p)| Ok((*k, file_record(p)?)))
                .collect::<anyhow::Result<_>>()?,
            outputs: outputs
                .iter()
                .filter(|(_, p)| p.is_file())
                .map(|(k, p)| Ok((*k, file_record(p)?)))
                .collect::<anyhow::Result<_>>()?,
            summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&target, text).with_context(|| format!("cannot write manifest {}", target.display()))
    }
}

/// Runs the command line and returns the process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn explicit_types(args: &TypeArgs) -> Result<Option<TypeList>, Failure> {
    args.types
        .as_ref()
        .map(|names| infer_type_list(names.iter().map(|s| s.trim())))
        .transpose()
        .usage()
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::ExtendDict {
            dict,
            phrases,
            emb,
            out,
            tau1,
            tau2,
            theta1,
            theta2,
            inclusive_frequency,
            no_case_fold,
            types,
            common,
        } => {
            let mut run = Run::new("extend-dict", &common)?;
            let ext = &mut run.cfg.extension;
            ext.tau1 = tau1.unwrap_or(ext.tau1);
            ext.tau2 = tau2.unwrap_or(ext.tau2);
            ext.theta1 = theta1.unwrap_or(ext.theta1);
            ext.theta2 = theta2.unwrap_or(ext.theta2);
            if inclusive_frequency {
                ext.strict_frequency = false;
            }
            run.cfg.extension.validate().usage()?;
            run.input("dict", &dict)?;
            run.input("phrases", &phrases)?;
            run.input("emb", &emb)?;
            let types = explicit_types(&types)?;

            runtime((|| {
                let (types, entries) = load_dictionary(&dict, types.as_ref())?;
                let phrase_list = load_phrases(&phrases)?;
                let table = load_embeddings(&emb, !no_case_fold)?;
                let extended = extend_dictionary(&entries, &phrase_list, &run.cfg.extension, &table);
                write_extended(&out, &extended, &types)?;
                let added = extended.iter().filter(|e| e.similarity < 1.0).count();
                println!(
                    "{} entries ({} original, {} added) -> {}",
                    extended.len(),
                    extended.len() - added,
                    added,
                    out.display()
                );
                run.finish(
                    &[("extended", &out)],
                    Some(serde_json::json!({"entries": extended.len(), "added": added})),
                )
            })())
        }

        Command::Annotate {
            ext,
            corpus,
            format,
            out,
            theta1,
            theta2,
            case_fold,
            common,
        } => {
            let mut run = Run::new("annotate", &common)?;
            let e = &mut run.cfg.extension;
            e.theta1 = theta1.unwrap_or(e.theta1);
            e.theta2 = theta2.unwrap_or(e.theta2);
            run.cfg.extension.validate().usage()?;
            run.input("ext", &ext)?;
            run.input("corpus", &corpus)?;

            runtime((|| {
                let (types, entries) = load_extended(&ext, None)?;
                let types = widen_for_corpus(types, &corpus, format)?;
                let sentences = load_corpus(&corpus, format, &types)?;
                let annotator = Annotator::new(&entries, &types, &run.cfg.extension, case_fold);
                let annotated = annotator.annotate_corpus(&sentences);
                write_annotated(&out, &types, &annotated, false)?;
                let n: usize = annotated.iter().map(|a| a.positives.len()).sum();
                println!("{n} annotated spans in {} sentences -> {}", annotated.len(), out.display());
                run.finish(&[("annotated", &out)], Some(serde_json::json!({"positives": n})))
            })())
        }

        Command::Sample {
            annotated,
            out,
            ratio,
            max_span_len,
            common,
        } => {
            let mut run = Run::new("sample", &common)?;
            let s = &mut run.cfg.sampling;
            s.ratio = ratio.unwrap_or(s.ratio);
            s.max_span_len = max_span_len.unwrap_or(s.max_span_len);
            if !(s.ratio > 0.0 && s.ratio.is_finite()) || s.max_span_len == 0 {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "--ratio must be positive and --max-span-len at least 1"
                )));
            }
            run.input("annotated", &annotated)?;

            runtime((|| {
                let mut cache = load_annotated(&annotated)?;
                let n = sample_training_spans(
                    &mut cache.sentences,
                    &cache.types,
                    run.cfg.sampling.max_span_len,
                    run.cfg.sampling.ratio,
                    run.cfg.seed,
                )?;
                write_annotated(&out, &cache.types, &cache.sentences, true)?;
                println!("{n} negative spans sampled -> {}", out.display());
                run.finish(&[("sampled", &out)], Some(serde_json::json!({"negatives": n})))
            })())
        }

        Command::Train {
            train: train_path,
            dev,
            emb,
            out,
            no_case_fold,
            hidden_dim,
            attn_dim,
            max_span_len,
            context_radius,
            lr,
            epochs,
            tokens_per_batch,
            clip,
            attention_warmup,
            per_part_attention,
            common,
        } => {
            let mut run = Run::new("train", &common)?;
            let m = &mut run.cfg.model;
            m.hidden_dim = hidden_dim.unwrap_or(m.hidden_dim);
            m.attn_dim = attn_dim.unwrap_or(m.attn_dim);
            m.max_span_len = max_span_len.unwrap_or(m.max_span_len);
            m.context_radius = context_radius.unwrap_or(m.context_radius);
            if per_part_attention {
                m.shared_attention = false;
            }
            let t = &mut run.cfg.training;
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.tokens_per_batch = tokens_per_batch.unwrap_or(t.tokens_per_batch);
            t.clip_norm = clip.unwrap_or(t.clip_norm);
            t.attention_warmup = attention_warmup.unwrap_or(t.attention_warmup);
            t.seed = run.cfg.seed;
            run.cfg.training.validate().usage()?;
            let m = run.cfg.model;
            if m.hidden_dim == 0 || m.attn_dim == 0 || m.max_span_len == 0 {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "model dimensions and --max-span-len must be positive"
                )));
            }
            run.input("train", &train_path)?;
            if let Some(dev) = &dev {
                run.input("dev", dev)?;
            }
            run.input("emb", &emb)?;

            let train_set = load_annotated(&train_path).context("cannot load training data").usage()?;
            if !train_set.sampled {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "{} has no negative spans; run `distner sample` on it first",
                    train_path.display()
                )));
            }
            if let Some(long) = train_set
                .sentences
                .iter()
                .flat_map(|a| a.training_spans())
                .find(|s| s.span.len() > m.max_span_len)
            {
                return Err(Failure::Usage(anyhow::anyhow!(
                    "training span {} is longer than --max-span-len {}",
                    long.span,
                    m.max_span_len
                )));
            }

            runtime((|| {
                let dev_set = dev.as_ref().map(load_annotated).transpose()?;
                if let Some(d) = &dev_set {
                    if d.types != train_set.types {
                        bail!("dev and training data use different type lists");
                    }
                }
                let table = Arc::new(load_embeddings(&emb, !no_case_fold)?);
                let encoder = StaticEncoder::with_radius(table, m.hidden_dim, m.context_radius);
                let mut model = SpanModel::new(encoder, train_set.types.clone(), m, run.cfg.seed);
                let report = train(
                    &mut model,
                    &train_set.sentences,
                    dev_set.as_ref().map(|d| &d.sentences[..]),
                    &run.cfg.training,
                )?;
                model.save(&out)?;
                println!(
                    "loss {:.4} -> {:.4}, kept epoch {} of {} -> {}",
                    report.initial_loss,
                    report.train_losses.last().copied().unwrap_or(report.initial_loss),
                    report.best_epoch,
                    run.cfg.training.epochs,
                    out.display()
                );
                run.finish(&[("model", &out)], Some(serde_json::to_value(&report)?))
            })())
        }

        Command::Predict {
            model,
            emb,
            corpus,
            format,
            out,
            max_span_len,
            common,
        } => {
            let mut run = Run::new("predict", &common)?;
            if max_span_len == Some(0) {
                return Err(Failure::Usage(anyhow::anyhow!("--max-span-len must be at least 1")));
            }
            run.input("model", &model)?;
            run.input("emb", &emb)?;
            run.input("corpus", &corpus)?;

            runtime((|| {
                let ckpt_text = fs::read_to_string(&model).with_context(|| format!("cannot read {}", model.display()))?;
                let ckpt: crate::model::Checkpoint = serde_json::from_str(&ckpt_text)?;
                let table = Arc::new(load_embeddings(&emb, ckpt.case_fold)?);
                let span_model = SpanModel::from_checkpoint(ckpt, table)?;
                let m = max_span_len.unwrap_or(span_model.config.max_span_len);
                run.cfg.model = span_model.config;
                let types = span_model.types.clone();
                let mut sentences = load_corpus(&corpus, format, &types)
                    .or_else(|_| -> anyhow::Result<Vec<Sentence>> {
                        // gold labels outside the model's types are irrelevant here
                        let wide = widen_for_corpus(types.clone(), &corpus, format)?;
                        Ok(load_corpus(&corpus, format, &wide)?)
                    })?;
                for s in &mut sentences {
                    s.gold = None;
                }
                let preds = sentences
                    .iter()
                    .map(|s| predict_sentence(&s.tokens, &span_model, m))
                    .collect::<crate::Result<Vec<_>>>()?;
                write_predictions(&sentences, &preds, &types, &out)?;
                let n: usize = preds.iter().map(Vec::len).sum();
                println!("{n} mentions in {} sentences -> {}", sentences.len(), out.display());
                run.finish(&[("predictions", &out)], Some(serde_json::json!({"mentions": n})))
            })())
        }

        Command::Eval {
            pred,
            gold,
            format,
            dict,
            json,
            out,
            empty_precision_one,
            case_fold,
            types,
            common,
        } => {
            let mut run = Run::new("eval", &common)?;
            run.input("pred", &pred)?;
            run.input("gold", &gold)?;
            if let Some(d) = &dict {
                run.input("dict", d)?;
            }
            let explicit = explicit_types(&types)?;

            runtime((|| {
                let types = match explicit {
                    Some(t) => t,
                    None => {
                        let mut names = scan_type_names(&gold, format)?;
                        names.extend(scan_type_names(&pred, CorpusFormat::Jsonl)?);
                        infer_type_list(names)?
                    }
                };
                let gold_sents = load_corpus(&gold, format, &types)?;
                let pred_sents = load_corpus(&pred, CorpusFormat::Jsonl, &types)?;
                let preds: Vec<_> = pred_sents.into_iter().map(|s| s.gold.unwrap_or_default()).collect();
                let opts = EvalOptions { empty_precision_one };
                let report = match &dict {
                    Some(d) => {
                        let (_, entries) = load_dictionary(d, None)?;
                        // the dictionary may use its own type order; only mentions matter
                        evaluate_with_subsets(&preds, &gold_sents, &types, &TokenOverlap::new(&entries, case_fold), opts)?
                    }
                    None => evaluate(&preds, &gold_sents, &types, opts)?,
                };
                let rendered = serde_json::to_string_pretty(&report)?;
                if json {
                    println!("{rendered}");
                } else {
                    print!("{}", format_report(&report));
                }
                let mut outputs = Vec::new();
                if let Some(o) = &out {
                    fs::write(o, format!("{rendered}\n")).with_context(|| format!("cannot write {}", o.display()))?;
                    outputs.push(("report", o.as_path()));
                }
                run.finish(&outputs, Some(serde_json::to_value(&report)?))
            })())
        }

        Command::Quality {
            annotated,
            gold,
            format,
            json,
            common,
        } => {
            let mut run = Run::new("quality", &common)?;
            run.input("annotated", &annotated)?;
            if let Some(g) = &gold {
                run.input("gold", g)?;
            }

            runtime((|| {
                let cache = load_annotated(&annotated)?;
                let gold_sents: Vec<Sentence> = match &gold {
                    Some(g) => load_corpus(g, format, &cache.types)?,
                    None => cache.sentences.iter().map(|a| a.sentence.clone()).collect(),
                };
                let q = annotation_quality(&cache.sentences, &gold_sents)?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&q)?);
                } else {
                    println!(
                        "precision {:.4}  recall {:.4}  ({} correct, {} annotated, {} gold)",
                        q.precision, q.recall, q.correct, q.annotated, q.gold
                    );
                }
                run.finish(&[], Some(serde_json::to_value(q)?))
            })())
        }

        Command::Synth { out_dir, common } => {
            let mut run = Run::new("synth", &common)?;
            if common.seed.is_some() {
                run.cfg.synthetic.seed = run.cfg.seed;
            }
            run.cfg.synthetic.validate().usage()?;

            runtime((|| {
                let data = generate(&run.cfg.synthetic)?;
                let files = data.write_to_dir(&out_dir)?;
                println!(
                    "{} train / {} test sentences, {} dictionary entries -> {}",
                    data.train.len(),
                    data.test.len(),
                    data.dictionary.len(),
                    out_dir.display()
                );
                let manifest = run.manifest.clone().unwrap_or_else(|| out_dir.join("manifest.json"));
                let run = Run {
                    manifest: Some(manifest),
                    ..run
                };
                run.finish(
                    &[
                        ("dict", &files.dictionary),
                        ("phrases", &files.phrases),
                        ("emb", &files.embeddings),
                        ("train", &files.train),
                        ("test", &files.test),
                    ],
                    None,
                )
            })())
        }
    }
}

/// Adds any entity types found in `corpus` but missing from `types`.
fn widen_for_corpus(types: TypeList, corpus: &Path, format: CorpusFormat) -> anyhow::Result<TypeList> {
    let extra: Vec<String> = scan_type_names(corpus, format)?
        .into_iter()
        .filter(|n| types.index_of(n).is_none())
        .collect();
    if extra.is_empty() {
        return Ok(types);
    }
    let mut names = types.predefined().to_vec();
    names.extend(extra);
    Ok(TypeList::new(names, types.name(types.none()).to_string())?)
}

/// Flushes stdout; used by the binary before exiting.
pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(cli_main(["distner", "--help"]), 0);
        assert_eq!(cli_main(["distner", "--version"]), 0);
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(cli_main(["distner", "eval", "--bogus"]), 1);
        assert_eq!(cli_main(["distner", "frobnicate"]), 1);
    }

    #[test]
    fn missing_input_exits_one() {
        assert_eq!(
            cli_main(["distner", "eval", "--pred", "/nonexistent/p.jsonl", "--gold", "/nonexistent/g.jsonl"]),
            1
        );
    }

    #[test]
    fn bad_threshold_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x");
        fs::write(&f, "a\tDisease\n").unwrap();
        let p = f.to_str().unwrap();
        let out = dir.path().join("o").to_str().unwrap().to_string();
        assert_eq!(
            cli_main(["distner", "extend-dict", "--dict", p, "--phrases", p, "--emb", p, "--out", &out, "--tau2", "3"]),
            1
        );
    }

    #[test]
    fn config_file_is_layered_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 3\n[extension]\ntau2 = 0.6\n").unwrap();
        let common = Common {
            config: Some(path.clone()),
            manifest: None,
            seed: Some(9),
        };
        let run = Run::new("x", &common).unwrap();
        assert_eq!(run.cfg.seed, 9);
        assert_eq!(run.cfg.extension.tau2, 0.6);
        assert_eq!(run.cfg.extension.tau1, 5);

        fs::write(&path, "[extension]\nbogus = 1\n").unwrap();
        assert!(matches!(Run::new("x", &common), Err(Failure::Usage(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.extension.tau2 = 0.5;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
