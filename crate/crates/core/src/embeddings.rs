//! Word vectors, sentence encoding, the emotion dictionary, and video feature
//! ingestion.
//!
//! Vectors come from a whitespace-separated word-vector file when one is
//! supplied; any token missing from it falls back to a unit-norm vector drawn
//! from a generator seeded by `(seed, token)`.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The shipped 179-word emotion vocabulary, one word per line.
pub const DEFAULT_EMOTION_WORDS: &str = include_str!("../data/emotions.txt");

/// Lowercases, splits on whitespace, and strips leading/trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}

fn normalize_token(raw: &str) -> Option<String> {
    let t = raw.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    (!t.is_empty()).then_some(t)
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Unit-norm `d`-vector keyed by `(seed, token)`.
pub fn deterministic_embedding(token: &str, seed: u64, d: usize) -> Vec<f64> {
    let key = fnv1a(seed.to_le_bytes().into_iter().chain(token.bytes()));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    File(String),
    Deterministic(u64),
}

/// Frozen token → vector map with a seeded fallback for unknown tokens.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fallback_seed: u64,
    source: EmbeddingSource,
}

impl EmbeddingTable {
    /// A table with no stored vectors; every lookup is deterministic.
    pub fn deterministic(dim: usize, seed: u64) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
            fallback_seed: seed,
            source: EmbeddingSource::Deterministic(seed),
        }
    }

    pub fn from_map(dim: usize, vectors: HashMap<String, Vec<f64>>, fallback_seed: u64) -> Result<Self> {
        if let Some((tok, v)) = vectors.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::usage(format!(
                "vector for {tok:?} has {} entries, table dimension is {dim}",
                v.len()
            )));
        }
        Ok(EmbeddingTable {
            dim,
            vectors,
            fallback_seed,
            source: EmbeddingSource::Deterministic(fallback_seed),
        })
    }

    pub fn with_fallback_seed(mut self, seed: u64) -> Self {
        self.fallback_seed = seed;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> &EmbeddingSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    pub fn lookup(&self, token: &str) -> Vec<f64> {
        match self.vectors.get(token) {
            Some(v) => v.clone(),
            None => deterministic_embedding(token, self.fallback_seed, self.dim),
        }
    }
}

/// Reads a word-vector file: each line is a token followed by exactly `d`
/// decimals. A later line for the same token replaces the earlier one.
pub fn load_word_vectors(path: &Path, d: usize) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path)?;
    let mut table = parse_word_vectors(std::io::BufReader::new(file), d)?;
    table.source = EmbeddingSource::File(path.display().to_string());
    Ok(table)
}

pub fn parse_word_vectors(reader: impl BufRead, d: usize) -> Result<EmbeddingTable> {
    if d == 0 {
        return Err(Error::usage("word-vector dimension must be positive"));
    }
    let mut vectors = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: format!("bad number {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != d {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {d} values after token {token:?}, found {}", values.len()),
            });
        }
        vectors.insert(token.to_string(), values);
    }
    Ok(EmbeddingTable {
        dim: d,
        vectors,
        fallback_seed: 0,
        source: EmbeddingSource::Deterministic(0),
    })
}

/// Mean of the token vectors after normalisation; order-free.
pub fn encode_text<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable) -> Result<Vec<f64>> {
    let toks: Vec<String> = tokens.iter().filter_map(|t| normalize_token(t.as_ref())).collect();
    if toks.is_empty() {
        return Err(Error::usage("cannot encode an empty token list"));
    }
    let mut acc = vec![0.0; table.dim()];
    for t in &toks {
        for (a, v) in acc.iter_mut().zip(table.lookup(t)) {
            *a += v;
        }
    }
    let n = toks.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Frame matrix of one video and its mean-pooled summary.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub id: String,
    pub frames: Tensor,
    pub pooled: Vec<f64>,
}

impl VideoFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

pub fn ingest_video(frames: &[Vec<f64>], id: &str) -> Result<VideoFeatures> {
    if frames.is_empty() {
        return Err(Error::usage(format!("video {id} has no frames")));
    }
    if frames[0].is_empty() {
        return Err(Error::usage(format!("video {id} has zero-width frames")));
    }
    let frames = Tensor::from_rows(frames)
        .map_err(|_| Error::usage(format!("video {id} has ragged frame rows")))?;
    let pooled = frames.mean_rows();
    Ok(VideoFeatures { id: id.to_string(), frames, pooled })
}

/// Ordered emotion vocabulary and its embedding matrix (`N_w × d`).
#[derive(Clone, Debug)]
pub struct EmotionDictionary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    embeddings: Tensor,
}

impl EmotionDictionary {
    pub fn new<S: AsRef<str>>(words: &[S], table: &EmbeddingTable) -> Result<Self> {
        let mut list = Vec::with_capacity(words.len());
        let mut index = HashMap::new();
        for w in words {
            let norm = normalize_token(w.as_ref())
                .ok_or_else(|| Error::usage(format!("empty emotion word {:?}", w.as_ref())))?;
            if index.insert(norm.clone(), list.len()).is_some() {
                return Err(Error::usage(format!("duplicate emotion word {norm:?}")));
            }
            list.push(norm);
        }
        let rows: Vec<Vec<f64>> = list.iter().map(|w| table.lookup(w)).collect();
        let embeddings = if rows.is_empty() {
            Tensor::zeros(&[0, table.dim()])
        } else {
            Tensor::from_rows(&rows)?
        };
        Ok(EmotionDictionary { words: list, index, embeddings })
    }

    /// The shipped 179-word list embedded with `table`.
    pub fn default_list(table: &EmbeddingTable) -> Result<Self> {
        Self::new(&parse_word_list(DEFAULT_EMOTION_WORDS), table)
    }

    pub fn load(path: &Path, table: &EmbeddingTable) -> Result<Self> {
        Self::new(&parse_word_list(&std::fs::read_to_string(path)?), table)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Distinct dictionary words occurring in `tokens`, in dictionary order.
    pub fn words_in(&self, tokens: &[String]) -> Vec<String> {
        let present: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        self.words.iter().filter(|w| present.contains(w.as_str())).cloned().collect()
    }
}

/// One word per line; blank lines ignored.
pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_ab() -> EmbeddingTable {
        parse_word_vectors("a 1 0\nb 0 1".as_bytes(), 2).unwrap()
    }

    #[test]
    fn loads_vectors() {
        let t = table_ab();
        assert_eq!(t.lookup("a"), vec![1.0, 0.0]);
        assert_eq!(t.lookup("b"), vec![0.0, 1.0]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn short_line_is_parse_error() {
        let err = parse_word_vectors("a 1".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_word_vectors("a 1 0\nb x 1".as_bytes(), 2).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_word_vectors("".as_bytes(), 0), Err(Error::Usage(_))));
    }

    #[test]
    fn later_duplicates_win() {
        let t = parse_word_vectors("a 1 0\na 2 3".as_bytes(), 2).unwrap();
        assert_eq!(t.lookup("a"), vec![2.0, 3.0]);
    }

    #[test]
    fn empty_file_falls_back() {
        let t = parse_word_vectors("".as_bytes(), 4).unwrap();
        assert!(t.is_empty());
        assert_eq!(t.lookup("cat"), deterministic_embedding("cat", 0, 4));
    }

    #[test]
    fn deterministic_vectors() {
        let a = deterministic_embedding("cat", 11, 16);
        let b = deterministic_embedding("cat", 11, 16);
        assert_eq!(a, b);
        assert_ne!(a, deterministic_embedding("dog", 11, 16));
        assert_ne!(a, deterministic_embedding("cat", 12, 16));
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(tokenize("  A Girl, happily\tloses her tooth!  "), vec![
            "a", "girl", "happily", "loses", "her", "tooth"
        ]);
        assert!(tokenize("... !!").is_empty());
    }

    #[test]
    fn encode_text_is_mean() {
        let t = table_ab();
        assert_eq!(encode_text(&["a", "b"], &t).unwrap(), vec![0.5, 0.5]);
        assert_eq!(encode_text(&["b", "a"], &t).unwrap(), vec![0.5, 0.5]);
        let det = EmbeddingTable::deterministic(8, 3);
        assert_eq!(encode_text(&["cat"], &det).unwrap(), det.lookup("cat"));
        assert!(encode_text::<&str>(&[], &t).is_err());
        assert!(encode_text(&["!!"], &t).is_err());
    }

    #[test]
    fn ingest_pools_frames() {
        let v = ingest_video(&[vec![1.0, 0.0], vec![0.0, 1.0]], "v").unwrap();
        assert_eq!(v.pooled, vec![0.5, 0.5]);
        let v = ingest_video(&[vec![3.0, -1.0]], "v").unwrap();
        assert_eq!(v.pooled, vec![3.0, -1.0]);
        let u = vec![0.25, -4.0, 7.5];
        let v = ingest_video(&vec![u.clone(); 16], "v").unwrap();
        assert_eq!(v.pooled, u);
        assert!(ingest_video(&[vec![1.0, 2.0], vec![1.0]], "v").is_err());
        assert!(ingest_video(&[], "v").is_err());
    }

    #[test]
    fn dictionary_rows_and_duplicates() {
        let t = EmbeddingTable::deterministic(6, 9);
        let d = EmotionDictionary::new(&["Happily", "sadly"], &t).unwrap();
        assert_eq!(d.words(), &["happily", "sadly"]);
        assert_eq!(d.embeddings().row(1), t.lookup("sadly").as_slice());
        let again = EmotionDictionary::new(&["happily", "sadly"], &t).unwrap();
        assert_eq!(d.embeddings(), again.embeddings());
        assert!(EmotionDictionary::new(&["sad", "sad"], &t).is_err());
    }

    #[test]
    fn default_dictionary_has_179_words() {
        let t = EmbeddingTable::deterministic(4, 0);
        let d = EmotionDictionary::default_list(&t).unwrap();
        assert_eq!(d.len(), 179);
        assert_eq!(d.embeddings().shape(), &[179, 4]);
    }
}
