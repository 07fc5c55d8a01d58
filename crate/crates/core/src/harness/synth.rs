use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_jsonl, Frames, SampleRecord};
use crate::embeddings::{parse_word_list, EmbeddingTable, DEFAULT_EMOTION_WORDS};
use crate::error::{Error, Result};
use crate::retrieval::CorpusRecord;

const SUBJECTS: &[&str] = &[
    "man", "woman", "dog", "cat", "child", "boy", "girl", "bird", "horse", "chef", "player", "baby",
    "monkey", "rabbit", "teacher", "singer",
];
const VERBS: &[&str] = &[
    "rides", "plays", "cuts", "holds", "eats", "throws", "carries", "pushes", "watches", "kicks",
    "cooks", "drives", "opens", "paints", "catches", "cleans",
];
const OBJECTS: &[&str] = &[
    "ball", "guitar", "onion", "bicycle", "car", "door", "bread", "apple", "box", "kite", "book",
    "fence", "cake", "rope", "boat", "piano",
];
const PLACES: &[&str] = &[
    "park", "kitchen", "street", "garden", "room", "field", "beach", "yard", "stage", "forest",
    "road", "hall", "river", "shop", "school", "pool",
];

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub samples: usize,
    /// Plain (non-emotion) words, split evenly across subjects, verbs,
    /// objects and places.
    pub vocab_size: usize,
    /// Emotion words drawn from the front of the default list.
    pub emotion_count: usize,
    /// Target shares of emotional-bias, neutral and factual-bias captions.
    pub proportions: [f64; 3],
    pub seed: u64,
    pub d: usize,
    pub frames: usize,
    /// Extra corpus captions per sample, each under its own corpus video.
    pub corpus_variants: usize,
    pub embedding_seed: u64,
    /// Per-coordinate noise scale, relative to `1/sqrt(d)`.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            samples: 100,
            vocab_size: 64,
            emotion_count: 12,
            proportions: [0.3, 0.5, 0.2],
            seed: 0,
            d: 300,
            frames: 16,
            corpus_variants: 3,
            embedding_seed: 0,
            noise: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Vec<SampleRecord>,
    pub corpus: Vec<CorpusRecord>,
    pub emotions: Vec<String>,
}

/// Exact label counts from shares: rounded, with any remainder given to the
/// largest share.
fn label_counts(n: usize, p: [f64; 3]) -> [usize; 3] {
    let mut c = p.map(|x| (x * n as f64).round() as usize);
    let total: usize = c.iter().sum();
    let biggest = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).expect("three shares");
    if total > n {
        c[biggest] -= total - n;
    } else {
        c[biggest] += n - total;
    }
    c
}

fn caption(label: usize, s: &str, v: &str, o: &str, emo: &str, place: &str) -> Vec<String> {
    let words: Vec<&str> = match label {
        0 => vec!["the", s, emo, v, o],
        1 => vec!["the", s, v, "the", o, emo, "in", place],
        _ => vec!["the", s, v, "the", o],
    };
    words.into_iter().map(String::from).collect()
}

/// Deterministic dataset, corpus and emotion list whose captions realise the
/// requested bias labels exactly. Frames sit near the mean embedding of the
/// caption's content words plus seeded noise.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthOutput> {
    if spec.proportions.iter().any(|&p| !(0.0..=1.0).contains(&p))
        || (spec.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::usage(format!("bias proportions {:?} must be in [0, 1] and sum to 1", spec.proportions)));
    }
    if spec.samples == 0 || spec.d == 0 || spec.frames == 0 {
        return Err(Error::usage("samples, d and frames must be positive"));
    }
    let all_emotions = parse_word_list(DEFAULT_EMOTION_WORDS);
    if spec.emotion_count > all_emotions.len() {
        return Err(Error::usage(format!("at most {} emotion words are available", all_emotions.len())));
    }
    let emotions: Vec<String> = all_emotions[..spec.emotion_count].to_vec();
    let per_role = (spec.vocab_size / 4).clamp(1, SUBJECTS.len());
    let (subj, verb, obj, place) = (&SUBJECTS[..per_role], &VERBS[..per_role], &OBJECTS[..per_role], &PLACES[..per_role]);
    if spec.samples > per_role.pow(3) {
        return Err(Error::usage(format!(
            "{} samples need more than {per_role}³ distinct triplets; raise vocab_size",
            spec.samples
        )));
    }

    let mut counts = label_counts(spec.samples, spec.proportions);
    if emotions.is_empty() && counts[0] + counts[1] > 0 {
        log::warn!("no emotion words: every caption is factual");
        counts = [0, 0, spec.samples];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..3).flat_map(|l| std::iter::repeat_n(l, counts[l])).collect();
    labels.shuffle(&mut rng);

    let table = EmbeddingTable::deterministic(spec.d, spec.embedding_seed);
    let noise = Normal::new(0.0, spec.noise / (spec.d as f64).sqrt()).expect("finite noise");
    let mut used = HashSet::new();
    let (mut dataset, mut corpus) = (Vec::new(), Vec::new());
    for (i, &label) in labels.iter().enumerate() {
        let (s, v, o) = loop {
            let t = (rng.random_range(0..per_role), rng.random_range(0..per_role), rng.random_range(0..per_role));
            if used.insert(t) {
                break (subj[t.0], verb[t.1], obj[t.2]);
            }
        };
        let p = place[rng.random_range(0..per_role)];
        let emo = if emotions.is_empty() { "" } else { emotions[rng.random_range(0..emotions.len())].as_str() };
        let words = caption(label, s, v, o, emo, p);

        let mut content = vec![s, v, o];
        match label {
            0 => content.push(emo),
            1 => content.extend([emo, p]),
            _ => {}
        }
        let mut base = vec![0.0; spec.d];
        for w in &content {
            for (b, x) in base.iter_mut().zip(table.lookup(w)) {
                *b += x / content.len() as f64;
            }
        }
        let frames: Vec<Vec<f64>> = (0..spec.frames)
            .map(|_| base.iter().map(|b| b + noise.sample(&mut rng)).collect())
            .collect();
        let video_id = format!("v{i:04}");
        let triplet = vec![s.to_string(), v.to_string(), o.to_string()];
        corpus.push(CorpusRecord {
            id: format!("c{i:04}-0"),
            video_id: video_id.clone(),
            sentence: words.join(" "),
            triplet: Some(triplet.clone()),
            embedding: None,
        });
        for j in 1..=spec.corpus_variants {
            let vl = if emotions.is_empty() { 2 } else { rng.random_range(0..3) };
            let ve = if emotions.is_empty() { "" } else { emotions[rng.random_range(0..emotions.len())].as_str() };
            let vp = place[rng.random_range(0..per_role)];
            corpus.push(CorpusRecord {
                id: format!("c{i:04}-{j}"),
                video_id: format!("cv{i:04}-{j}"),
                sentence: caption(vl, s, v, o, ve, vp).join(" "),
                triplet: Some(triplet.clone()),
                embedding: None,
            });
        }
        let emotion_words: Vec<String> = if label < 2 { vec![emo.to_string()] } else { Vec::new() };
        dataset.push(SampleRecord {
            id: format!("s{i:04}"),
            video_id,
            frames: Frames::Inline(frames),
            caption: words.join(" "),
            emotion_words: Some(emotion_words),
            triplet: Some(triplet),
        });
    }
    Ok(SynthOutput { dataset, corpus, emotions })
}

/// Writes `dataset.jsonl`, `corpus.jsonl` and `emotions.txt` into `dir`.
pub fn write_synth(out: &SynthOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("dataset.jsonl"), &out.dataset)?;
    write_jsonl(&dir.join("corpus.jsonl"), &out.corpus)?;
    let mut words = out.emotions.join("\n");
    if !words.is_empty() {
        words.push('\n');
    }
    std::fs::write(dir.join("emotions.txt"), words)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmotionDictionary;
    use crate::evaluation::{bias_report, DEFAULT_T1, DEFAULT_T2};
    use crate::harness::dataset::load_dataset;

    fn small(samples: usize, emotion_count: usize, proportions: [f64; 3]) -> SynthSpec {
        SynthSpec { samples, emotion_count, proportions, d: 8, frames: 3, ..SynthSpec::default() }
    }

    fn report(out: &SynthOutput) -> crate::evaluation::BiasReport {
        let dict = EmotionDictionary::new(&out.emotions, &EmbeddingTable::deterministic(8, 0)).unwrap();
        let caps: Vec<(String, Vec<String>)> = out.dataset.iter().map(|r| (r.video_id.clone(), r.tokens())).collect();
        bias_report(&caps, &dict, DEFAULT_T1, DEFAULT_T2).unwrap()
    }

    #[test]
    fn realises_requested_proportions() {
        let r = report(&synth_dataset(&small(100, 12, [0.3, 0.5, 0.2])).unwrap());
        assert_eq!((r.proportions.emotional_bias, r.proportions.neutral, r.proportions.factual_bias), (0.3, 0.5, 0.2));
    }

    #[test]
    fn no_emotion_words_means_all_factual() {
        let r = report(&synth_dataset(&small(20, 0, [0.3, 0.5, 0.2])).unwrap());
        assert_eq!(r.proportions.factual_bias, 1.0);
    }

    #[test]
    fn infeasible_proportions_rejected() {
        let e = synth_dataset(&small(10, 4, [0.5, 0.5, 0.5])).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn plain_words_are_not_emotion_words() {
        let all = parse_word_list(DEFAULT_EMOTION_WORDS);
        for w in SUBJECTS.iter().chain(VERBS).chain(OBJECTS).chain(PLACES).chain(&["the", "in"]) {
            assert!(!all.iter().any(|e| e == w), "{w}");
        }
    }

    #[test]
    fn deterministic_and_round_trips() {
        let spec = small(12, 5, [0.25, 0.5, 0.25]);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let out = synth_dataset(&spec).unwrap();
        write_synth(&out, a.path()).unwrap();
        write_synth(&synth_dataset(&spec).unwrap(), b.path()).unwrap();
        for f in ["dataset.jsonl", "corpus.jsonl", "emotions.txt"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let loaded = load_dataset(&a.path().join("dataset.jsonl"), Some(8)).unwrap();
        assert_eq!(loaded, out.dataset);
    }
}
