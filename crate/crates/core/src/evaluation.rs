//! Caption metrics (BLEU, ROUGE-L, CIDEr), emotion accuracies, hybrid
//! scores and the factual/emotional bias statistics.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::embeddings::EmotionDictionary;
use crate::error::{Error, Result};

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Ngram<'_>, usize> {
    let mut m = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::usage("empty evaluation corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::usage(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::usage(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU up to order `n`: clipped n-gram precisions pooled over the
/// corpus, geometric mean, closest-reference brevity penalty. Unsmoothed, so
/// any zero precision gives 0.
pub fn bleu_n(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    check_corpus(candidates, references)?;
    if !(1..=4).contains(&n) {
        return Err(Error::usage(format!("BLEU order must be 1..=4, got {n}")));
    }
    let (mut c_len, mut r_len) = (0usize, 0usize);
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for k in 1..=n {
            let counts = ngram_counts(cand, k);
            let mut max_ref: BTreeMap<Ngram<'_>, usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matched[k - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if matched.iter().zip(&total).any(|(&m, &t)| m == 0 || t == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched.iter().zip(&total).map(|(&m, &t)| (m as f64 / t as f64).ln()).sum::<f64>() / n as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure with β = 1.2 against the best-matching references
/// (precision and recall maximised separately over references).
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidate.is_empty() || references.is_empty() || references.iter().any(|r| r.is_empty()) {
        return Err(Error::usage("ROUGE-L needs non-empty sequences"));
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let l = lcs(candidate, reference) as f64;
        p = p.max(l / candidate.len() as f64);
        r = r.max(l / reference.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

pub fn corpus_rouge_l(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &BTreeMap<Vec<String>, usize>, docs: f64) -> BTreeMap<Ngram<'a>, f64> {
    let counts = ngram_counts(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 / total as f64 * (docs / d).ln())
        })
        .collect()
}

fn cosine(a: &BTreeMap<Ngram<'_>, f64>, b: &BTreeMap<Ngram<'_>, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: for n = 1..4, term-frequency × `ln(N / df)` vectors (document
/// frequency over the reference sets), cosine of the candidate against each
/// reference averaged over references and candidates; mean over n, × 10.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let docs = references.len() as f64;
    if references.len() < 2 {
        log::warn!("CIDEr over a single document: every idf is zero");
    }
    let mut score = 0.0;
    for n in 1..=4 {
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for refs in references {
            let mut seen: HashSet<Ngram<'_>> = HashSet::new();
            for r in refs {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        let mut sum_n = 0.0;
        for (cand, refs) in candidates.iter().zip(references) {
            let vc = tfidf(cand, n, &df, docs);
            let s: f64 = refs.iter().map(|r| cosine(&vc, &tfidf(r, n, &df, docs))).sum();
            sum_n += s / refs.len() as f64;
        }
        score += sum_n / candidates.len() as f64;
    }
    Ok(10.0 * score / 4.0)
}

/// `(acc_sw, acc_c)`.
///
/// `acc_sw` pools generated emotion-word tokens over the corpus and counts
/// those found in their reference emotion set; it is 0 when no caption
/// generates one. `acc_c` is the share of captions whose generated emotion
/// set meets the reference set, with captions emotion-free on both sides
/// counted as correct.
pub fn emotion_accuracy(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    dictionary: &EmotionDictionary,
) -> Result<(f64, f64)> {
    check_corpus(candidates, references)?;
    let (mut hit_tokens, mut gen_tokens, mut correct) = (0usize, 0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let gen: Vec<&String> = cand.iter().filter(|t| dictionary.contains(t)).collect();
        let reference: HashSet<&String> = refs.iter().flatten().filter(|t| dictionary.contains(t)).collect();
        gen_tokens += gen.len();
        hit_tokens += gen.iter().filter(|t| reference.contains(*t)).count();
        let ok = if gen.is_empty() && reference.is_empty() {
            true
        } else {
            gen.iter().any(|t| reference.contains(*t))
        };
        correct += ok as usize;
    }
    let acc_sw = if gen_tokens == 0 { 0.0 } else { hit_tokens as f64 / gen_tokens as f64 };
    Ok((acc_sw, correct as f64 / candidates.len() as f64))
}

/// A named way of folding caption quality and emotion accuracy into the two
/// hybrid scores.
pub trait Combiner {
    fn name(&self) -> &str;
    /// `(bfs, cfs)`.
    fn combine(&self, report: &MetricReport) -> (f64, f64);
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// `bfs = H(mean BLEU-1..4, acc_c)`, `cfs = H(min(CIDEr/10, 1), acc_c)`
/// with `H` the harmonic mean.
pub struct HarmonicCombiner;

impl Combiner for HarmonicCombiner {
    fn name(&self) -> &str {
        "harmonic(mean_bleu_1_4, acc_c) / harmonic(min(cider/10, 1), acc_c)"
    }

    fn combine(&self, r: &MetricReport) -> (f64, f64) {
        let bleu = (r.bleu_1 + r.bleu_2 + r.bleu_3 + r.bleu_4) / 4.0;
        (harmonic(bleu, r.acc_c), harmonic((r.cider / 10.0).min(1.0), r.acc_c))
    }
}

pub const ACCURACY_DEFINITION: &str = "acc_sw: corpus-pooled generated emotion-word tokens found in the reference emotion set; \
     acc_c: captions whose generated emotion set meets the reference set (both empty counts as correct)";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub acc_sw: f64,
    pub acc_c: f64,
    pub bfs: f64,
    pub cfs: f64,
    pub combiner: String,
    pub accuracy_definition: String,
    pub samples: usize,
}

pub fn evaluate(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    dictionary: &EmotionDictionary,
    combiner: &dyn Combiner,
) -> Result<MetricReport> {
    let (acc_sw, acc_c) = emotion_accuracy(candidates, references, dictionary)?;
    let mut r = MetricReport {
        bleu_1: bleu_n(candidates, references, 1)?,
        bleu_2: bleu_n(candidates, references, 2)?,
        bleu_3: bleu_n(candidates, references, 3)?,
        bleu_4: bleu_n(candidates, references, 4)?,
        rouge_l: corpus_rouge_l(candidates, references)?,
        cider: cider(candidates, references)?,
        acc_sw,
        acc_c,
        bfs: 0.0,
        cfs: 0.0,
        combiner: combiner.name().to_string(),
        accuracy_definition: ACCURACY_DEFINITION.to_string(),
        samples: candidates.len(),
    };
    (r.bfs, r.cfs) = combiner.combine(&r);
    Ok(r)
}

pub const DEFAULT_T1: f64 = 1.0 / 6.0;
pub const DEFAULT_T2: f64 = 1.0 / 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasLabel {
    EmotionalBias,
    Neutral,
    FactualBias,
}

/// Emotion-word ratio above `t1` is emotional bias, below `t2` factual bias,
/// anything else (boundaries included) neutral.
pub fn classify_bias(tokens: &[String], dictionary: &EmotionDictionary, t1: f64, t2: f64) -> Result<BiasLabel> {
    if tokens.is_empty() {
        return Err(Error::usage("cannot classify an empty caption"));
    }
    let emotional = tokens.iter().filter(|t| dictionary.contains(t)).count();
    let ratio = emotional as f64 / tokens.len() as f64;
    Ok(if ratio > t1 {
        BiasLabel::EmotionalBias
    } else if ratio < t2 {
        BiasLabel::FactualBias
    } else {
        BiasLabel::Neutral
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelCounts {
    pub emotional_bias: usize,
    pub neutral: usize,
    pub factual_bias: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Proportions {
    pub emotional_bias: f64,
    pub neutral: f64,
    pub factual_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleLabel {
    pub id: String,
    pub label: BiasLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub t1: f64,
    pub t2: f64,
    pub counts: LabelCounts,
    pub proportions: Proportions,
    pub labels: Vec<SampleLabel>,
}

/// Labels each sample (keyed by id; several captions per id vote, ties go to
/// neutral) and aggregates the proportions. Output is ordered by id.
pub fn bias_report<S: AsRef<str>>(
    captions: &[(S, Vec<String>)],
    dictionary: &EmotionDictionary,
    t1: f64,
    t2: f64,
) -> Result<BiasReport> {
    if captions.is_empty() {
        return Err(Error::usage("bias report over an empty dataset"));
    }
    if !(t2 < t1) {
        return Err(Error::usage(format!("thresholds need t2 < t1, got t1={t1}, t2={t2}")));
    }
    let mut votes: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (id, tokens) in captions {
        let label = classify_bias(tokens, dictionary, t1, t2)?;
        votes.entry(id.as_ref().to_string()).or_default()[label as usize] += 1;
    }
    let mut counts = [0usize; 3];
    let labels: Vec<SampleLabel> = votes
        .into_iter()
        .map(|(id, v)| {
            let max = *v.iter().max().expect("three labels");
            let label = if v.iter().filter(|&&c| c == max).count() > 1 {
                BiasLabel::Neutral
            } else if v[0] == max {
                BiasLabel::EmotionalBias
            } else if v[1] == max {
                BiasLabel::Neutral
            } else {
                BiasLabel::FactualBias
            };
            counts[label as usize] += 1;
            SampleLabel { id, label }
        })
        .collect();
    let total = labels.len() as f64;
    Ok(BiasReport {
        t1,
        t2,
        counts: LabelCounts { emotional_bias: counts[0], neutral: counts[1], factual_bias: counts[2] },
        proportions: Proportions {
            emotional_bias: counts[0] as f64 / total,
            neutral: counts[1] as f64 / total,
            factual_bias: counts[2] as f64 / total,
        },
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingTable;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn dict() -> EmotionDictionary {
        EmotionDictionary::new(&["happily", "sadly", "angry"], &EmbeddingTable::deterministic(4, 0)).unwrap()
    }

    #[test]
    fn bleu_fixtures() {
        let c = vec![toks("the cat sat on the mat")];
        let r = vec![vec![toks("the cat sat on the mat")]];
        for n in 1..=4 {
            assert!((bleu_n(&c, &r, n).unwrap() - 1.0).abs() < 1e-12);
        }
        let c = vec![toks("the the the")];
        let r = vec![vec![toks("the cat")]];
        assert!((bleu_n(&c, &r, 1).unwrap() - 0.333333).abs() < 1e-6);
        // full precision, candidate 3 tokens vs reference 5: BP = e^(1 − 5/3)
        let c = vec![toks("a b c")];
        let r = vec![vec![toks("a b c d e")]];
        assert!((bleu_n(&c, &r, 1).unwrap() - (1.0f64 - 5.0 / 3.0).exp()).abs() < 1e-12);
        assert!(bleu_n(&[], &[], 1).is_err());
    }

    #[test]
    fn rouge_fixtures() {
        assert_eq!(rouge_l(&toks("a b c"), &[toks("a b c")]).unwrap(), 1.0);
        assert_eq!(rouge_l(&toks("a b c"), &[toks("x y")]).unwrap(), 0.0);
        assert!((rouge_l(&toks("a b c"), &[toks("a c d")]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(rouge_l(&[], &[toks("a")]).is_err());
    }

    #[test]
    fn cider_fixtures() {
        let sents = ["a man is riding a horse", "two dogs play in the park", "a woman slices an onion slowly"];
        let c: Vec<Vec<String>> = sents.iter().map(|s| toks(s)).collect();
        let r: Vec<Vec<Vec<String>>> = sents.iter().map(|s| vec![toks(s)]).collect();
        assert!((cider(&c, &r).unwrap() - 10.0).abs() < 1e-12);
        let c2 = vec![toks("zz yy"), toks("qq"), toks("ww vv uu")];
        assert_eq!(cider(&c2, &r).unwrap(), 0.0);
    }

    /// Hand-worked table, three documents.
    ///
    /// refs: d1 "a b a", d2 "a c", d3 "b c d"; candidate for d1 "a b".
    /// df(a)=2, df(b)=2, df(c)=2, df(d)=1; ln(3/2)=0.405465.
    /// n=1: cand tf a=.5 b=.5 → (.202733, .202733); ref tf a=2/3 b=1/3 →
    /// (.270310, .135155); cos = (.054801+.027400)/(.286707·.302216) = 0.948683.
    /// n=2: cand {ab}, ref {ab, ba}; df(ab)=1, df(ba)=1 → cand (ln3), ref
    /// (ln3/2, ln3/2) → cos = 0.707107. n=3, n=4: cand has none → 0.
    /// CIDEr_d1 = 10 · (0.948683 + 0.707107)/4 = 4.139476.
    #[test]
    fn cider_hand_table() {
        let r = vec![vec![toks("a b a")], vec![toks("a c")], vec![toks("b c d")]];
        let c = vec![toks("a b"), toks("a c"), toks("b c d")];
        let n = 3.0;
        // Document 2 and 3 candidates equal their references.
        let d2 = 10.0 * (1.0 + 1.0 + 0.0 + 0.0) / 4.0;
        let d3 = 10.0 * (1.0 + 1.0 + 1.0 + 0.0) / 4.0;
        let d1 = 4.139475;
        let expected = (d1 + d2 + d3) / n;
        assert!((cider(&c, &r).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn emotion_accuracy_fixtures() {
        let d = dict();
        let r = vec![vec![toks("he walks happily")]];
        assert_eq!(emotion_accuracy(&[toks("he runs happily")], &r, &d).unwrap(), (1.0, 1.0));
        assert_eq!(emotion_accuracy(&[toks("he runs sadly")], &r, &d).unwrap(), (0.0, 0.0));
        let c = vec![toks("a dog"), toks("he runs happily")];
        let r2 = vec![vec![toks("a dog runs")], vec![toks("he runs sadly")]];
        assert_eq!(emotion_accuracy(&c, &r2, &d).unwrap(), (0.0, 0.5));
    }

    #[test]
    fn hybrid_fixtures() {
        let base = MetricReport {
            bleu_1: 0.5,
            bleu_2: 0.5,
            bleu_3: 0.5,
            bleu_4: 0.5,
            rouge_l: 0.0,
            cider: 10.0,
            acc_sw: 0.0,
            acc_c: 0.5,
            bfs: 0.0,
            cfs: 0.0,
            combiner: String::new(),
            accuracy_definition: String::new(),
            samples: 1,
        };
        assert_eq!(HarmonicCombiner.combine(&base).0, 0.5);
        let zero = MetricReport { acc_c: 0.0, ..base.clone() };
        assert_eq!(HarmonicCombiner.combine(&zero), (0.0, 0.0));
        let ones = MetricReport { bleu_1: 1.0, bleu_2: 1.0, bleu_3: 1.0, bleu_4: 1.0, acc_c: 1.0, ..base };
        assert_eq!(HarmonicCombiner.combine(&ones), (1.0, 1.0));
    }

    #[test]
    fn bias_fixtures_and_boundaries() {
        let d = dict();
        let classify = |s: &str| classify_bias(&toks(s), &d, DEFAULT_T1, DEFAULT_T2).unwrap();
        assert_eq!(classify("the dog happily runs home"), BiasLabel::EmotionalBias);
        assert_eq!(classify("a b c d e f g h i j happily"), BiasLabel::FactualBias);
        assert_eq!(classify("a b c d e f g happily"), BiasLabel::Neutral);
        assert_eq!(classify("a b c d e happily"), BiasLabel::Neutral); // exactly 1/6
        assert_eq!(classify("a b c d e f g h i happily"), BiasLabel::Neutral); // exactly 1/10
        assert!(classify_bias(&[], &d, DEFAULT_T1, DEFAULT_T2).is_err());
    }

    #[test]
    fn bias_report_votes_and_proportions() {
        let d = dict();
        let caps = vec![
            ("v1", toks("the dog happily runs home")),
            ("v1", toks("the dog happily runs fast")),
            ("v1", toks("a dog runs")),
            ("v2", toks("the dog happily runs home")),
            ("v2", toks("a dog runs")),
            ("v3", toks("a dog runs")),
        ];
        let r = bias_report(&caps, &d, DEFAULT_T1, DEFAULT_T2).unwrap();
        let labels: Vec<BiasLabel> = r.labels.iter().map(|l| l.label).collect();
        assert_eq!(labels, vec![BiasLabel::EmotionalBias, BiasLabel::Neutral, BiasLabel::FactualBias]);
        let p = &r.proportions;
        assert!((p.emotional_bias + p.neutral + p.factual_bias - 1.0).abs() < 1e-12);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["labels"][0]["label"], "emotional-bias");
        assert!(bias_report::<&str>(&[], &d, DEFAULT_T1, DEFAULT_T2).is_err());
    }

    fn corpus_strategy() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
        let word = prop::sample::select(vec!["a", "b", "c", "d", "happily", "sadly"]);
        let sent = prop::collection::vec(word.prop_map(String::from), 1..8);
        prop::collection::vec((sent.clone(), prop::collection::vec(sent, 1..3)), 2..6)
            .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn metrics_bounded_and_order_free((c, r) in corpus_strategy(), rot in 0usize..6) {
            let d = dict();
            let rep = evaluate(&c, &r, &d, &HarmonicCombiner).unwrap();
            for x in [rep.bleu_1, rep.bleu_2, rep.bleu_3, rep.bleu_4, rep.rouge_l, rep.acc_sw, rep.acc_c, rep.bfs, rep.cfs] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
            }
            prop_assert!(rep.cider >= 0.0);
            let k = rot % c.len();
            let (mut c2, mut r2) = (c.clone(), r.clone());
            c2.rotate_left(k);
            r2.rotate_left(k);
            let rep2 = evaluate(&c2, &r2, &d, &HarmonicCombiner).unwrap();
            prop_assert!((rep.bleu_4 - rep2.bleu_4).abs() < 1e-12);
            prop_assert!((rep.rouge_l - rep2.rouge_l).abs() < 1e-12);
            prop_assert!((rep.cider - rep2.cider).abs() < 1e-9);
        }

        #[test]
        fn duplication_preserves_label(s in prop::collection::vec(prop::sample::select(vec!["a", "b", "happily", "sadly", "c"]), 1..12)) {
            let d = dict();
            let t: Vec<String> = s.iter().map(|x| x.to_string()).collect();
            let doubled: Vec<String> = t.iter().chain(&t).cloned().collect();
            prop_assert_eq!(
                classify_bias(&t, &d, DEFAULT_T1, DEFAULT_T2).unwrap(),
                classify_bias(&doubled, &d, DEFAULT_T1, DEFAULT_T2).unwrap()
            );
        }
    }
}
