use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use super::config::{RunConfig, SEED_ENV};
use super::dataset::load_dataset;
use super::pipeline::{self, Generated, Resources};
use super::synth::{synth_dataset, write_synth, SynthSpec};
use crate::embeddings::tokenize;
use crate::error::{Error, Result};
use crate::evaluation::{bias_report, DEFAULT_T1, DEFAULT_T2};
use crate::model::{Order, Toggles};
use crate::retrieval::{read_corpus, CorpusRecord};
use crate::training::{gradcheck, loss_csv, small_gradcheck_setup, GRADCHECK_TOLERANCE};

#[derive(Parser, Debug)]
#[command(name = "face-forge", version, about = "Retrieval-enhanced emotional video captioning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the matching config field.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Emotion dictionary, one word per line
    #[arg(long, global = true)]
    emotions: Option<PathBuf>,
    #[arg(long, global = true)]
    word_vectors: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// msvd | ve | combine
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Disable a stage: re | fc | ea | ba (repeatable)
    #[arg(long, global = true, value_delimiter = ',')]
    ablate: Vec<String>,
    /// fact-first | emotion-first
    #[arg(long, global = true)]
    order: Option<String>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    max_len: Option<usize>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true)]
    n_q: Option<usize>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    checkpoint_every: Option<usize>,
    #[arg(long, global = true)]
    target_loss: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Factual/emotional bias proportions of a dataset's captions
    AnalyzeBias,
    /// Materialise corpus triplets and embeddings as JSONL
    BuildIndex,
    /// Top-k retrieval groups for one video
    Retrieve {
        #[arg(long)]
        video_id: String,
    },
    Train,
    Generate,
    Evaluate {
        /// Generated captions JSONL; generated from --checkpoint when absent
        #[arg(long)]
        captions: Option<PathBuf>,
    },
    /// Whole-model finite-difference check
    Gradcheck {
        #[arg(long)]
        small: bool,
    },
    /// Write a synthetic dataset, corpus and emotion list into --out
    Synth {
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        vocab_size: usize,
        #[arg(long, default_value_t = 12)]
        emotion_count: usize,
        /// emotional,neutral,factual shares
        #[arg(long, default_value = "0.3,0.5,0.2")]
        proportions: String,
        #[arg(long, default_value_t = 3)]
        variants: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
    },
}

impl Common {
    fn overrides(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| json!(p));
        put("dataset", path(&self.dataset));
        put("corpus", path(&self.corpus));
        put("emotions", path(&self.emotions));
        put("word_vectors", path(&self.word_vectors));
        put("checkpoint", path(&self.checkpoint));
        put("out", path(&self.out));
        put("k", self.k.map(|x| json!(x)));
        put("seed", self.seed.map(|x| json!(x)));
        put("profile", self.profile.as_ref().map(|x| json!(x)));
        put("ablate", (!self.ablate.is_empty()).then(|| json!(self.ablate)));
        put("order", self.order.as_ref().map(|x| json!(x)));
        put("beam", self.beam.map(|x| json!(x)));
        put("max_len", self.max_len.map(|x| json!(x)));
        put("d", self.d.map(|x| json!(x)));
        put("frames", self.frames.map(|x| json!(x)));
        put("n_q", self.n_q.map(|x| json!(x)));
        put("max_steps", self.max_steps.map(|x| json!(x)));
        put("batch_size", self.batch_size.map(|x| json!(x)));
        put("lr", self.lr.map(|x| json!(x)));
        put("checkpoint_every", self.checkpoint_every.map(|x| json!(x)));
        put("target_loss", self.target_loss.map(|x| json!(x)));
        Value::Object(m)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage/config error, 2 data error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
        }
    }
    Ok(())
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i)?);
        s.push('\n');
    }
    Ok(s)
}

fn dispatch(cli: Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), cli.common.overrides(), env_seed.as_deref())?;
    let out = cfg.out.as_deref();
    match cli.command {
        Command::AnalyzeBias => {
            let table = pipeline::embedding_table(cfg.word_vectors.as_deref(), cfg.d, cfg.embedding_seed)?;
            let dict = pipeline::emotion_dictionary(cfg.emotions.as_deref(), &table)?;
            let samples = load_dataset(cfg.require(&cfg.dataset, "dataset")?, None)?;
            let caps: Vec<(String, Vec<String>)> = samples.iter().map(|s| (s.video_id.clone(), s.tokens())).collect();
            let report = bias_report(&caps, &dict, DEFAULT_T1, DEFAULT_T2)?;
            emit(out, &(serde_json::to_string_pretty(&report)? + "\n"))
        }
        Command::BuildIndex => {
            let table = pipeline::embedding_table(cfg.word_vectors.as_deref(), cfg.d, cfg.embedding_seed)?;
            let corpus = read_corpus(cfg.require(&cfg.corpus, "corpus")?)?;
            let index = pipeline::build_index(&corpus, &table)?;
            let records: Vec<CorpusRecord> = index
                .entries()
                .iter()
                .map(|e| CorpusRecord {
                    id: e.id.clone(),
                    video_id: e.video_id.clone(),
                    sentence: e.sentence.clone(),
                    triplet: Some(e.triplet.components().iter().map(|s| s.to_string()).collect()),
                    embedding: Some(e.embedding.clone()),
                })
                .collect();
            emit(out, &jsonl(&records)?)
        }
        Command::Retrieve { video_id } => {
            let res = Resources::load(&cfg, true)?;
            let sample = res
                .samples
                .iter()
                .find(|s| s.video_id == video_id)
                .ok_or_else(|| Error::data(format!("no sample with video id {video_id:?}")))?;
            let query = sample.frame_tensor()?.mean_rows();
            let index = res.index.as_ref().expect("retrieval index loaded");
            let groups = index.retrieve_groups(&query, cfg.k, Some(&video_id), &cfg.prefix, &res.table)?;
            let lines: Vec<Value> = groups.iter().map(|g| g.to_json()).collect();
            emit(out, &jsonl(&lines)?)
        }
        Command::Train => {
            let toggles = cfg.toggles()?;
            let ckpt = cfg.require(&cfg.checkpoint, "checkpoint")?.to_path_buf();
            let res = Resources::load(&cfg, toggles.retrieval)?;
            let every = cfg.checkpoint_every;
            let trained = pipeline::train(&cfg, &res, |row, model, meta| {
                if every > 0 && row.step % every == 0 {
                    pipeline::save_model(model, meta, &ckpt)?;
                }
                Ok(())
            })?;
            pipeline::save_model(&trained.model, &trained.meta, &ckpt)?;
            if let Some(last) = trained.history.last() {
                log::info!("trained {} steps, final loss {:.6}", last.step, last.total);
            }
            emit(out, &loss_csv(&trained.history))
        }
        Command::Generate => {
            let generated = generate_from_checkpoint(&cfg)?.0;
            emit(out, &jsonl(&generated)?)
        }
        Command::Evaluate { captions } => {
            let (generated, samples, dict) = match captions {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)?;
                    let mut gen = Vec::new();
                    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                        let v: Value = serde_json::from_str(line)
                            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
                        let id = v["id"].as_str().ok_or_else(|| Error::Parse { line: i + 1, msg: "missing id".into() })?;
                        let caption = v["caption"]
                            .as_str()
                            .ok_or_else(|| Error::Parse { line: i + 1, msg: "missing caption".into() })?;
                        let tokens = tokenize(caption);
                        gen.push(Generated { id: id.into(), caption: caption.into(), tokens, beam_scores: None });
                    }
                    let table = pipeline::embedding_table(cfg.word_vectors.as_deref(), cfg.d, cfg.embedding_seed)?;
                    let dict = pipeline::emotion_dictionary(cfg.emotions.as_deref(), &table)?;
                    let samples = load_dataset(cfg.require(&cfg.dataset, "dataset")?, None)?;
                    (gen, samples, dict)
                }
                None => {
                    let (gen, res) = generate_from_checkpoint(&cfg)?;
                    (gen, res.samples, res.dictionary)
                }
            };
            let report = pipeline::score(&samples, &generated, &dict)?;
            emit(out, &(serde_json::to_string_pretty(&report)? + "\n"))
        }
        Command::Gradcheck { small } => {
            if !small {
                return Err(Error::usage("only the small configuration is supported; pass --small"));
            }
            let mut lines = String::new();
            let mut ok = true;
            for order in [Order::FactFirst, Order::EmotionFirst] {
                let (model, ctxs) = small_gradcheck_setup(cfg.seed, order, Toggles::default())?;
                for g in gradcheck(&model, &ctxs, &cfg.train_config()?.weights())? {
                    let pass = g.relative_error < GRADCHECK_TOLERANCE;
                    ok &= pass;
                    lines.push_str(&serde_json::to_string(&json!({
                        "order": order, "group": g.group, "values": g.values,
                        "relative_error": g.relative_error, "pass": pass,
                    }))?);
                    lines.push('\n');
                }
            }
            emit(out, &lines)?;
            if ok {
                Ok(())
            } else {
                Err(Error::data("gradient check failed"))
            }
        }
        Command::Synth { samples, vocab_size, emotion_count, proportions, variants, noise } => {
            let p: Vec<f64> = proportions
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::usage(format!("bad --proportions {proportions:?}")))?;
            let proportions: [f64; 3] =
                p.try_into().map_err(|_| Error::usage("--proportions needs three values"))?;
            let spec = SynthSpec {
                samples,
                vocab_size,
                emotion_count,
                proportions,
                seed: cfg.seed,
                d: cfg.d,
                frames: cfg.frames,
                corpus_variants: variants,
                embedding_seed: cfg.embedding_seed,
                noise,
            };
            let dir = cfg.require(&cfg.out, "out")?;
            write_synth(&synth_dataset(&spec)?, dir)
        }
    }
}

/// Loads the checkpoint and decodes every dataset sample.
fn generate_from_checkpoint(cfg: &RunConfig) -> Result<(Vec<Generated>, Resources)> {
    let (model, meta) = pipeline::load_model(cfg.require(&cfg.checkpoint, "checkpoint")?)?;
    let mut run_cfg = cfg.clone();
    run_cfg.d = meta.dims.d;
    run_cfg.embedding_seed = meta.embedding_seed;
    run_cfg.word_vectors = meta.word_vectors.clone();
    let mut res = Resources::load(&run_cfg, meta.toggles.retrieval)?;
    res.dictionary = crate::embeddings::EmotionDictionary::new(&meta.emotions, &res.table)?;
    let contexts = res.contexts(&meta.vocab, meta.k, &meta.prefix, meta.dims.max_len)?;
    let generated = pipeline::generate(&model, &meta.vocab, &contexts, cfg.beam, cfg.max_len)?;
    Ok((generated, res))
}

