use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

/// Anything that can score the next token given a prefix starting at `<bos>`.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn bos(&self) -> usize;
    fn eos(&self) -> usize;
    /// Tokens the search may emit. Everything by default.
    fn allowed(&self, _token: usize) -> bool {
        true
    }
    /// Log-probabilities over the whole vocabulary for the next token.
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

fn checked_log_probs<S: StepScorer + ?Sized>(scorer: &S, prefix: &[usize]) -> Result<Vec<f64>> {
    let lp = scorer.next_log_probs(prefix)?;
    if lp.len() != scorer.vocab_size() {
        return Err(Error::usage(format!(
            "scorer returned {} log-probs for a vocabulary of {}",
            lp.len(),
            scorer.vocab_size()
        )));
    }
    Ok(lp)
}

/// Argmax decoding from `<bos>` until `<eos>` or `max_len` emitted tokens.
/// Ties go to the lowest token id. The result excludes `<bos>` and keeps a
/// final `<eos>` if one was produced.
pub fn decode_greedy<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Vec<usize>> {
    let mut seq = vec![scorer.bos()];
    for _ in 0..max_len {
        let lp = checked_log_probs(scorer, &seq)?;
        let mut best: Option<usize> = None;
        for (tok, &v) in lp.iter().enumerate() {
            if scorer.allowed(tok) && best.is_none_or(|b| v > lp[b]) {
                best = Some(tok);
            }
        }
        let tok = best.ok_or_else(|| Error::usage("no token is allowed"))?;
        seq.push(tok);
        if tok == scorer.eos() {
            break;
        }
    }
    Ok(seq.split_off(1))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Emitted tokens, without `<bos>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per emitted token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// The final beam, best first.
    pub beam: Vec<Hypothesis>,
}

impl BeamResult {
    pub fn scores(&self) -> Vec<f64> {
        self.beam.iter().map(Hypothesis::score).collect()
    }
}

fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search ranked by length-normalised log-probability. Finished
/// hypotheses compete with live ones for the `beam` slots; ties go to the
/// lexicographically smaller token sequence, so `beam = 1` is greedy.
pub fn decode_beam<S: StepScorer + ?Sized>(scorer: &S, beam: usize, max_len: usize) -> Result<BeamResult> {
    if beam == 0 {
        return Err(Error::usage("beam width must be at least 1"));
    }
    let mut pool = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    for _ in 0..max_len {
        if pool.iter().all(|h| h.finished) {
            break;
        }
        let mut next = Vec::new();
        for h in pool {
            if h.finished {
                next.push(h);
                continue;
            }
            let prefix: Vec<usize> = std::iter::once(scorer.bos()).chain(h.tokens.iter().copied()).collect();
            let lp = checked_log_probs(scorer, &prefix)?;
            for (tok, &v) in lp.iter().enumerate() {
                if !scorer.allowed(tok) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis { tokens, log_prob: h.log_prob + v, finished: tok == scorer.eos() });
            }
        }
        if next.is_empty() {
            return Err(Error::usage("no token is allowed"));
        }
        next.sort_by(rank);
        next.truncate(beam);
        pool = next;
    }
    pool.sort_by(rank);
    Ok(BeamResult { best: pool[0].clone(), beam: pool })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Log-probabilities from a seeded hash of the whole prefix.
    struct HashScorer {
        vocab: usize,
        seed: u64,
        banned: Vec<usize>,
        coarse: bool,
    }

    impl StepScorer for HashScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn bos(&self) -> usize {
            0
        }
        fn eos(&self) -> usize {
            1
        }
        fn allowed(&self, token: usize) -> bool {
            !self.banned.contains(&token)
        }
        fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
            let mut h = self.seed;
            for &t in prefix {
                h = h.wrapping_mul(0x100000001b3).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let raw: Vec<f64> = (0..self.vocab)
                .map(|_| {
                    let x: f64 = rng.random_range(-3.0..3.0);
                    if self.coarse { x.round() } else { x }
                })
                .collect();
            let lse = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
            Ok(raw.iter().map(|x| x - lse).collect())
        }
    }

    /// Every sequence the search could return, scored the same way.
    fn exhaustive(s: &HashScorer, max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::<usize>::new(), 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            let done = seq.last() == Some(&s.eos()) || seq.len() == max_len;
            if done {
                let score = lp / seq.len() as f64;
                out.push((seq, score));
                continue;
            }
            let prefix: Vec<usize> = std::iter::once(s.bos()).chain(seq.iter().copied()).collect();
            let next = s.next_log_probs(&prefix).unwrap();
            for (t, v) in next.iter().enumerate() {
                if s.allowed(t) {
                    let mut n = seq.clone();
                    n.push(t);
                    stack.push((n, lp + v));
                }
            }
        }
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        out
    }

    #[test]
    fn greedy_respects_max_len_and_stops_at_eos() {
        let s = HashScorer { vocab: 6, seed: 3, banned: vec![0], coarse: false };
        let one = decode_greedy(&s, 1).unwrap();
        assert_eq!(one.len(), 1);
        for seed in 0..50 {
            let s = HashScorer { vocab: 6, seed, banned: vec![0], coarse: false };
            let g = decode_greedy(&s, 8).unwrap();
            assert!(g.len() <= 8);
            assert!(g.iter().take(g.len().saturating_sub(1)).all(|&t| t != 1));
            assert_eq!(g, decode_greedy(&s, 8).unwrap());
        }
    }

    #[test]
    fn greedy_breaks_ties_by_lowest_id() {
        struct Flat;
        impl StepScorer for Flat {
            fn vocab_size(&self) -> usize {
                4
            }
            fn bos(&self) -> usize {
                0
            }
            fn eos(&self) -> usize {
                3
            }
            fn allowed(&self, t: usize) -> bool {
                t != 0
            }
            fn next_log_probs(&self, _: &[usize]) -> Result<Vec<f64>> {
                Ok(vec![-(4f64.ln()); 4])
            }
        }
        assert_eq!(decode_greedy(&Flat, 3).unwrap(), vec![1, 1, 1]);
        assert_eq!(decode_beam(&Flat, 1, 3).unwrap().best.tokens, vec![1, 1, 1]);
    }

    #[test]
    fn wide_beam_matches_exhaustive_search() {
        for seed in 0..40 {
            for (vocab, max_len) in [(3, 2), (4, 3), (6, 2), (6, 3)] {
                let s = HashScorer { vocab, seed, banned: vec![0], coarse: seed % 2 == 0 };
                let all = exhaustive(&s, max_len);
                let r = decode_beam(&s, all.len(), max_len).unwrap();
                assert_eq!(r.best.tokens, all[0].0, "seed {seed} vocab {vocab} len {max_len}");
                assert!((r.best.score() - all[0].1).abs() < 1e-12);
                assert_eq!(r.beam.len(), all.len());
            }
        }
    }

    #[test]
    fn zero_beam_is_usage_error() {
        let s = HashScorer { vocab: 3, seed: 0, banned: vec![], coarse: false };
        assert!(decode_beam(&s, 0, 3).is_err());
    }

    proptest! {
        #[test]
        fn beam_one_is_greedy_and_scores_sorted(seed in 0u64..100_000, vocab in 3usize..9, beam in 1usize..6) {
            let s = HashScorer { vocab, seed, banned: vec![0], coarse: seed % 3 == 0 };
            let g = decode_greedy(&s, 6).unwrap();
            prop_assert_eq!(&decode_beam(&s, 1, 6).unwrap().best.tokens, &g);
            let r = decode_beam(&s, beam, 6).unwrap();
            let sc = r.scores();
            prop_assert!(sc.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(r.beam.len() <= beam);
        }
    }
}
