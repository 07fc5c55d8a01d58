use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::SampleRecord;
use crate::embeddings::{load_word_vectors, tokenize, EmbeddingTable, EmotionDictionary};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, HarmonicCombiner, MetricReport};
use crate::generation::{decode_beam, decode_greedy, ModelScorer, Vocabulary};
use crate::model::{Model, ModelDims, Order, SampleContext, Toggles};
use crate::numerics::checkpoint;
use crate::retrieval::{read_corpus, CorpusRecord, RetrievalIndex, DEFAULT_VERBS};
use crate::training::{train_loop, ContextBuilder, LossRow};

pub fn embedding_table(word_vectors: Option<&Path>, d: usize, seed: u64) -> Result<EmbeddingTable> {
    match word_vectors {
        Some(p) => Ok(load_word_vectors(p, d)?.with_fallback_seed(seed)),
        None => Ok(EmbeddingTable::deterministic(d, seed)),
    }
}

pub fn emotion_dictionary(path: Option<&Path>, table: &EmbeddingTable) -> Result<EmotionDictionary> {
    match path {
        Some(p) => EmotionDictionary::load(p, table),
        None => EmotionDictionary::default_list(table),
    }
}

pub fn build_index(records: &[CorpusRecord], table: &EmbeddingTable) -> Result<RetrievalIndex> {
    RetrievalIndex::build(records, table, DEFAULT_VERBS)
}

/// Everything a model command reads from disk.
pub struct Resources {
    pub table: EmbeddingTable,
    pub dictionary: EmotionDictionary,
    pub samples: Vec<SampleRecord>,
    pub corpus: Vec<CorpusRecord>,
    pub index: Option<RetrievalIndex>,
}

impl Resources {
    /// Loads dataset, corpus (when retrieval is on), emotions and vectors.
    pub fn load(cfg: &RunConfig, retrieval: bool) -> Result<Self> {
        let table = embedding_table(cfg.word_vectors.as_deref(), cfg.d, cfg.embedding_seed)?;
        let dictionary = emotion_dictionary(cfg.emotions.as_deref(), &table)?;
        let samples = super::dataset::load_dataset(cfg.require(&cfg.dataset, "dataset")?, Some(cfg.d))?;
        let corpus = match (&cfg.corpus, retrieval) {
            (Some(p), _) => read_corpus(p)?,
            (None, true) => return Err(Error::usage("retrieval needs --corpus (or --ablate re)")),
            (None, false) => Vec::new(),
        };
        let index = if retrieval { Some(build_index(&corpus, &table)?) } else { None };
        Ok(Self { table, dictionary, samples, corpus, index })
    }

    /// Training-set vocabulary: every word of the dataset and corpus.
    pub fn vocabulary(&self) -> Vocabulary {
        let words = self
            .samples
            .iter()
            .flat_map(|s| s.tokens())
            .chain(self.corpus.iter().flat_map(|c| tokenize(&c.sentence)));
        Vocabulary::build(words, &self.dictionary)
    }

    pub fn contexts(&self, vocab: &Vocabulary, k: usize, prefix: &str, max_len: usize) -> Result<Vec<SampleContext>> {
        let builder = ContextBuilder {
            table: &self.table,
            dictionary: &self.dictionary,
            vocab,
            index: self.index.as_ref(),
            k,
            prefix,
            max_len,
        };
        self.samples
            .iter()
            .map(|s| builder.build(&s.id, &s.video_id, &s.frame_tensor()?, &s.tokens()))
            .collect()
    }
}

/// Stored beside a checkpoint so a model can be rebuilt without the
/// training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub dims: ModelDims,
    pub toggles: Toggles,
    pub order: Order,
    pub k: usize,
    pub prefix: String,
    pub embedding_seed: u64,
    pub word_vectors: Option<PathBuf>,
    pub emotions: Vec<String>,
    pub vocab: Vocabulary,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn save_model(model: &Model, meta: &ModelMeta, path: &Path) -> Result<()> {
    checkpoint::save(&model.store, path)?;
    std::fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model, ModelMeta)> {
    let text = std::fs::read_to_string(meta_path(path))
        .map_err(|e| Error::data(format!("checkpoint metadata {}: {e}", meta_path(path).display())))?;
    let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::data(format!("checkpoint metadata: {e}")))?;
    let table = embedding_table(meta.word_vectors.as_deref(), meta.dims.d, meta.embedding_seed)?;
    let dictionary = EmotionDictionary::new(&meta.emotions, &table)?;
    let mut model = Model::new(
        meta.dims,
        dictionary.embeddings().clone(),
        meta.vocab.emotion_flags().to_vec(),
        meta.toggles,
        meta.order,
        0,
    )?;
    let stored = checkpoint::load(path)?;
    checkpoint::restore_into(&mut model.store, &stored)?;
    Ok((model, meta))
}

pub struct Trained {
    pub model: Model,
    pub meta: ModelMeta,
    pub history: Vec<LossRow>,
}

/// Builds a fresh model from `cfg` and trains it on `res`. `on_step` sees
/// each loss row and the current model.
pub fn train(cfg: &RunConfig, res: &Resources, mut on_step: impl FnMut(&LossRow, &Model, &ModelMeta) -> Result<()>) -> Result<Trained> {
    let tc = cfg.train_config()?;
    let vocab = res.vocabulary();
    let dims = ModelDims {
        d: cfg.d,
        n_q: cfg.n_q,
        vocab: vocab.len(),
        n_w: res.dictionary.len(),
        max_len: cfg.max_len,
    };
    let contexts = res.contexts(&vocab, cfg.k, &cfg.prefix, cfg.max_len)?;
    let mut model = Model::new(
        dims,
        res.dictionary.embeddings().clone(),
        vocab.emotion_flags().to_vec(),
        tc.toggles,
        tc.order,
        cfg.seed,
    )?;
    let meta = ModelMeta {
        dims,
        toggles: tc.toggles,
        order: tc.order,
        k: cfg.k,
        prefix: cfg.prefix.clone(),
        embedding_seed: cfg.embedding_seed,
        word_vectors: cfg.word_vectors.clone(),
        emotions: res.dictionary.words().to_vec(),
        vocab,
    };
    let history = train_loop(&mut model, &contexts, &tc, |row, m| on_step(row, m, &meta))?;
    Ok(Trained { model, meta, history })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generated {
    pub id: String,
    pub caption: String,
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_scores: Option<Vec<f64>>,
}

/// Decodes one caption per context; `beam = 1` uses greedy search.
pub fn generate(model: &Model, vocab: &Vocabulary, contexts: &[SampleContext], beam: usize, max_len: usize) -> Result<Vec<Generated>> {
    let cfg = model.dims.decoder();
    let max_len = max_len.min(model.dims.max_len);
    contexts
        .iter()
        .map(|ctx| {
            let (m_bar, _) = model.memory(ctx)?;
            let scorer = ModelScorer { store: &model.store, cfg: &cfg, vocab, m_bar: &m_bar };
            let (ids, beam_scores) = if beam <= 1 {
                (decode_greedy(&scorer, max_len)?, None)
            } else {
                let r = decode_beam(&scorer, beam, max_len)?;
                let scores = r.scores();
                (r.best.tokens, Some(scores))
            };
            let tokens = vocab.decode(&ids);
            Ok(Generated { id: ctx.id.clone(), caption: tokens.join(" "), tokens, beam_scores })
        })
        .collect()
}

/// Scores generated captions against every dataset caption of the same video.
pub fn score(samples: &[SampleRecord], generated: &[Generated], dictionary: &EmotionDictionary) -> Result<MetricReport> {
    let mut cands = Vec::with_capacity(generated.len());
    let mut refs = Vec::with_capacity(generated.len());
    for g in generated {
        let sample = samples
            .iter()
            .find(|s| s.id == g.id)
            .ok_or_else(|| Error::data(format!("generated caption for unknown sample {}", g.id)))?;
        let references: Vec<Vec<String>> =
            samples.iter().filter(|s| s.video_id == sample.video_id).map(|s| s.tokens()).collect();
        cands.push(g.tokens.clone());
        refs.push(references);
    }
    // An empty candidate cannot be scored by ROUGE-L; it matches nothing.
    for c in &mut cands {
        if c.is_empty() {
            c.push(crate::generation::EOS.to_string());
        }
    }
    evaluate(&cands, &refs, dictionary, &HarmonicCombiner)
}
