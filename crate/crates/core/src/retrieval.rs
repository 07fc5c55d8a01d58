//! Caption repository, exact cosine top-K retrieval with leave-one-video-out
//! exclusion, and subject/predicate/object triplet extraction.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embeddings::{encode_text, tokenize, EmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_PREFIX: &str = "a photo of";

/// Verbs recognised by the triplet heuristic when no lexicon is supplied.
pub const DEFAULT_VERBS: &[&str] = &[
    "loses", "lose", "losing", "jumps", "jump", "jumping", "runs", "run", "running", "plays",
    "play", "playing", "eats", "eat", "eating", "rides", "ride", "riding", "throws", "throw",
    "throwing", "catches", "catch", "catching", "holds", "hold", "holding", "cuts", "cut",
    "cutting", "drives", "drive", "driving", "kicks", "kick", "kicking", "opens", "open",
    "opening", "pets", "pet", "petting", "chases", "chase", "chasing", "climbs", "climb",
    "climbing", "carries", "carry", "carrying", "watches", "watch", "watching", "hugs", "hug",
    "hugging", "pushes", "push", "pushing", "pulls", "pull", "pulling", "cooks", "cook",
    "cooking", "sings", "sing", "singing", "reads", "read", "reading", "paints", "paint",
    "painting", "feeds", "feed", "feeding", "slices", "slice", "slicing", "dances", "dance",
    "dancing", "swims", "swim", "swimming", "walks", "walk", "walking", "finds", "find",
    "finding", "breaks", "break", "breaking", "fixes", "fix", "fixing",
];

/// Function words skipped when picking subject/object content tokens.
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "her", "his", "their", "its", "my", "your", "our", "this", "that",
    "these", "those", "is", "are", "was", "were", "be", "been", "am", "of", "in", "on", "at",
    "to", "with", "by", "for", "from", "and", "or", "some", "into", "onto", "he", "she", "it",
    "they", "we", "i", "you", "him", "them",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Result<Self> {
        if [subject, predicate, object].iter().any(|s| s.trim().is_empty()) {
            return Err(Error::usage("triplet components must be non-empty"));
        }
        Ok(Triplet {
            subject: subject.to_string(),
            predicate: predicate.to_string(),
            object: object.to_string(),
        })
    }

    pub fn components(&self) -> [&str; 3] {
        [&self.subject, &self.predicate, &self.object]
    }
}

/// Lexicon-driven stand-in for a relation-extraction model.
///
/// Subject is the first content token before the first lexicon verb,
/// predicate is that verb, object is the first content token after it. With
/// no usable verb the middle content token is the predicate and its
/// neighbours are subject and object.
pub fn extract_triplet<S: AsRef<str>>(sentence: &str, verbs: &[S]) -> Result<Triplet> {
    let content: Vec<String> = tokenize(sentence)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .collect();
    if content.len() < 3 {
        return Err(Error::Extraction(format!(
            "{sentence:?} has {} content tokens, need at least 3",
            content.len()
        )));
    }
    let lexicon: HashSet<&str> = verbs.iter().map(|v| v.as_ref()).collect();
    let verb_at = content.iter().position(|t| lexicon.contains(t.as_str()));
    match verb_at {
        Some(p) if p > 0 && p + 1 < content.len() => {
            Triplet::new(&content[0], &content[p], &content[p + 1])
        }
        _ => {
            let m = content.len() / 2;
            Triplet::new(&content[m - 1], &content[m], &content[m + 1])
        }
    }
}

/// `(first, middle, last)` tokens; used when [`extract_triplet`] fails.
pub fn fallback_triplet(sentence: &str) -> Result<Triplet> {
    let toks = tokenize(sentence);
    if toks.is_empty() {
        return Err(Error::Extraction(format!("{sentence:?} has no tokens")));
    }
    Triplet::new(&toks[0], &toks[toks.len() / 2], &toks[toks.len() - 1])
}

/// Encodes S, P, O (each prefixed) as the rows of a `3 × d` matrix.
pub fn encode_triplet(t: &Triplet, prefix: &str, table: &EmbeddingTable) -> Result<Tensor> {
    let prefix_toks = tokenize(prefix);
    let rows = t
        .components()
        .iter()
        .map(|c| {
            let mut toks = prefix_toks.clone();
            toks.extend(tokenize(c));
            encode_text(&toks, table)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::usage("cosine similarity of a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a·b / (‖a‖‖b‖)`, computed as the dot product of the unit vectors and
/// clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(dot(&unit(a)?, &unit(b)?).clamp(-1.0, 1.0))
}

/// One line of a corpus JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub video_id: String,
    pub sentence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplet: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub id: String,
    pub video_id: String,
    pub sentence: String,
    pub triplet: Triplet,
    pub embedding: Vec<f64>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = std::fs::File::open(path)?;
    parse_corpus(std::io::BufReader::new(file))
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// A hit from [`RetrievalIndex::retrieve_topk`].
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub entry: usize,
    pub score: f64,
}

/// Exact cosine index over corpus sentence embeddings. Immutable once built.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    entries: Vec<CorpusEntry>,
    units: Vec<Vec<f64>>,
    dim: usize,
}

impl RetrievalIndex {
    pub fn build<S: AsRef<str>>(
        records: &[CorpusRecord],
        table: &EmbeddingTable,
        verbs: &[S],
    ) -> Result<Self> {
        let dim = table.dim();
        let mut entries = Vec::with_capacity(records.len());
        let mut units = Vec::with_capacity(records.len());
        let mut seen = HashSet::new();
        for (line, r) in records.iter().enumerate() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::data(format!("duplicate corpus id {:?}", r.id)));
            }
            let embedding = match &r.embedding {
                Some(e) if e.len() != dim => {
                    return Err(Error::data(format!(
                        "corpus entry {} (line {}) embedding has {} values, expected {dim}",
                        r.id,
                        line + 1,
                        e.len()
                    )))
                }
                Some(e) => e.clone(),
                None => encode_text(&tokenize(&r.sentence), table)
                    .map_err(|_| Error::data(format!("corpus entry {} has an empty sentence", r.id)))?,
            };
            let triplet = match &r.triplet {
                Some(t) if t.len() == 3 => Triplet::new(&t[0], &t[1], &t[2])
                    .map_err(|e| Error::data(format!("corpus entry {}: {e}", r.id)))?,
                Some(t) => {
                    return Err(Error::data(format!(
                        "corpus entry {} triplet has {} components",
                        r.id,
                        t.len()
                    )))
                }
                None => extract_triplet(&r.sentence, verbs)
                    .or_else(|_| fallback_triplet(&r.sentence))
                    .map_err(|e| Error::data(format!("corpus entry {}: {e}", r.id)))?,
            };
            units.push(
                unit(&embedding)
                    .map_err(|_| Error::data(format!("corpus entry {} has a zero embedding", r.id)))?,
            );
            entries.push(CorpusEntry {
                id: r.id.clone(),
                video_id: r.video_id.clone(),
                sentence: r.sentence.clone(),
                triplet,
                embedding,
            });
        }
        Ok(RetrievalIndex { entries, units, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &CorpusEntry {
        &self.entries[i]
    }

    /// The `k` most similar entries not owned by `exclude_video`, by
    /// descending cosine similarity with ties broken by ascending entry id.
    pub fn retrieve_topk(&self, query: &[f64], k: usize, exclude_video: Option<&str>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if query.len() != self.dim {
            return Err(Error::usage(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim
            )));
        }
        let q = unit(query)?;
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| exclude_video != Some(e.video_id.as_str()))
            .map(|(i, _)| Hit { entry: i, score: dot(&q, &self.units[i]).clamp(-1.0, 1.0) })
            .collect();
        if hits.len() < k {
            return Err(Error::config(format!(
                "need K={k} retrievable captions but only {} of {} are eligible after excluding {:?}",
                hits.len(),
                self.entries.len(),
                exclude_video
            )));
        }
        let order = |a: &Hit, b: &Hit| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.entries[a.entry].id.cmp(&self.entries[b.entry].id))
        };
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, order);
            hits.truncate(k);
        }
        hits.sort_by(order);
        Ok(hits)
    }

    /// Retrieval plus triplet encoding: the `k` groups for one video.
    pub fn retrieve_groups(
        &self,
        query: &[f64],
        k: usize,
        exclude_video: Option<&str>,
        prefix: &str,
        table: &EmbeddingTable,
    ) -> Result<Vec<RetrievalGroup>> {
        self.retrieve_topk(query, k, exclude_video)?
            .into_iter()
            .enumerate()
            .map(|(rank, hit)| {
                let e = &self.entries[hit.entry];
                Ok(RetrievalGroup {
                    rank: rank + 1,
                    entry_id: e.id.clone(),
                    video_id: e.video_id.clone(),
                    sentence: e.sentence.clone(),
                    score: hit.score,
                    triplet: e.triplet.clone(),
                    components: encode_triplet(&e.triplet, prefix, table)?,
                })
            })
            .collect()
    }
}

/// One retrieved caption with its triplet and `3 × d` component embeddings.
#[derive(Clone, Debug)]
pub struct RetrievalGroup {
    pub rank: usize,
    pub entry_id: String,
    pub video_id: String,
    pub sentence: String,
    pub score: f64,
    pub triplet: Triplet,
    pub components: Tensor,
}

impl RetrievalGroup {
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<Vec<f64>> = (0..3).map(|r| self.components.row(r).to_vec()).collect();
        serde_json::json!({
            "rank": self.rank,
            "id": self.entry_id,
            "video_id": self.video_id,
            "sentence": self.sentence,
            "score": self.score,
            "triplet": [self.triplet.subject, self.triplet.predicate, self.triplet.object],
            "components": rows,
        })
    }
}
