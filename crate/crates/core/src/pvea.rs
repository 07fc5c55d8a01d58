//! Progressive visual emotion augmentation: mine candidate emotions from the
//! dictionary with factual semantics as queries, then filter them with a
//! frame-level visual query map.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::xavier_uniform;
use crate::numerics::{attention, ParamStore, Tape, Tensor, Var};

pub fn register_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Result<()> {
    store.insert("pvea.phi_f", xavier_uniform(rng, d, d))?;
    store.insert("pvea.phi_v", xavier_uniform(rng, d, d))?;
    store.insert("pvea.phi_e", xavier_uniform(rng, d, d))?;
    Ok(())
}

/// `Ẽ = Attn(Q = F, K = V = E_0)`: every row is a convex combination of
/// dictionary embeddings.
pub fn mine_candidates(tape: &mut Tape, factual: Var, dictionary: Var) -> Result<Var> {
    if tape.shape(dictionary).first().copied().unwrap_or(0) == 0 {
        return Err(Error::usage("emotion dictionary is empty"));
    }
    attention(tape, factual, dictionary, dictionary, None)
}

/// `q_v = softmax_rows((F φ_F)(V φ_V)ᵀ)`, an `N × N` row-stochastic map.
pub fn visual_query(tape: &mut Tape, store: &ParamStore, factual: Var, frames: Var) -> Result<Var> {
    if tape.shape(factual) != tape.shape(frames) {
        return Err(Error::usage(format!(
            "visual query shape mismatch: {:?} vs {:?}",
            tape.shape(factual),
            tape.shape(frames)
        )));
    }
    let phi_f = tape.param_named(store, "pvea.phi_f")?;
    let phi_v = tape.param_named(store, "pvea.phi_v")?;
    let pf = tape.matmul(factual, phi_f)?;
    let pv = tape.matmul(frames, phi_v)?;
    let pvt = tape.transpose(pv)?;
    let scores = tape.matmul(pf, pvt)?;
    tape.softmax(scores, 1)
}

/// `E = q_v · (Ẽ φ_E)`.
pub fn augment_emotion(tape: &mut Tape, store: &ParamStore, query: Var, candidates: Var) -> Result<Var> {
    let phi_e = tape.param_named(store, "pvea.phi_e")?;
    let projected = tape.matmul(candidates, phi_e)?;
    tape.matmul(query, projected)
}

pub struct EmotionVars {
    pub candidates: Var,
    pub query: Var,
    pub emotions: Var,
}

/// The full mine → query → augment chain for one retrieval group.
pub fn augment(
    tape: &mut Tape,
    store: &ParamStore,
    factual: Var,
    frames: Var,
    dictionary: Var,
) -> Result<EmotionVars> {
    let candidates = mine_candidates(tape, factual, dictionary)?;
    let query = visual_query(tape, store, factual, frames)?;
    let emotions = augment_emotion(tape, store, query, candidates)?;
    Ok(EmotionVars { candidates, query, emotions })
}

/// Diagnostic only: softmax over the dot products of each dictionary word
/// with the frame-mean of `emotions`.
pub fn emotion_distribution(emotions: &Tensor, dictionary: &Tensor) -> Result<Vec<f64>> {
    let pooled = Tensor::new(vec![emotions.cols(), 1], emotions.mean_rows())?;
    let scores = dictionary.matmul(&pooled)?;
    Ok(scores.softmax(0)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(d: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        register_params(&mut s, &mut rng, d).unwrap();
        s
    }

    fn set(store: &mut ParamStore, name: &str, t: Tensor) {
        let id = store.id(name).unwrap();
        store.get_mut(id).value = t;
    }

    fn rows_rev(t: &Tensor) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..t.rows()).rev().map(|r| t.row(r).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_word_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let f = tape.constant(rand_tensor(&mut rng, &[4, 3]));
        let e0 = Tensor::from_rows(&[vec![0.2, -0.4, 0.9]]).unwrap();
        let e = tape.constant(e0.clone());
        let c = mine_candidates(&mut tape, f, e).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(c).row(r), e0.row(0));
        }
    }

    #[test]
    fn dictionary_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f0 = rand_tensor(&mut rng, &[4, 3]);
        let e0 = rand_tensor(&mut rng, &[6, 3]);
        let run = |e: Tensor| {
            let mut tape = Tape::new();
            let f = tape.constant(f0.clone());
            let e = tape.constant(e);
            let c = mine_candidates(&mut tape, f, e).unwrap();
            tape.value(c).clone()
        };
        let (a, b) = (run(e0.clone()), run(rows_rev(&e0)));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn default_candidate_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let f = tape.constant(rand_tensor(&mut rng, &[16, 300]));
        let e = tape.constant(rand_tensor(&mut rng, &[179, 300]));
        let c = mine_candidates(&mut tape, f, e).unwrap();
        assert_eq!(tape.shape(c), &[16, 300]);
    }

    #[test]
    fn zero_maps_give_uniform_query() {
        let d = 3;
        let mut s = store(d, 4);
        set(&mut s, "pvea.phi_f", Tensor::zeros(&[d, d]));
        set(&mut s, "pvea.phi_v", Tensor::zeros(&[d, d]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let f = tape.constant(rand_tensor(&mut rng, &[5, d]));
        let v = tape.constant(rand_tensor(&mut rng, &[5, d]));
        let q = visual_query(&mut tape, &s, f, v).unwrap();
        assert!(tape.value(q).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let mut tape = Tape::new();
        let f = tape.constant(rand_tensor(&mut rng, &[1, d]));
        let v = tape.constant(rand_tensor(&mut rng, &[1, d]));
        let q = visual_query(&mut tape, &store(d, 6), f, v).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0]);
    }

    #[test]
    fn augment_identity_and_uniform() {
        let d = 3;
        let mut s = store(d, 7);
        set(&mut s, "pvea.phi_e", Tensor::identity(d));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cand = rand_tensor(&mut rng, &[4, d]);

        let mut tape = Tape::new();
        let q = tape.constant(Tensor::identity(4));
        let c = tape.constant(cand.clone());
        let e = augment_emotion(&mut tape, &s, q, c).unwrap();
        assert_eq!(tape.value(e), &cand);

        let mut tape = Tape::new();
        let q = tape.constant(Tensor::full(&[4, 4], 0.25));
        let c = tape.constant(cand.clone());
        let e = augment_emotion(&mut tape, &s, q, c).unwrap();
        let mean = cand.mean_rows();
        for r in 0..4 {
            assert!(tape.value(e).row(r).iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn augment_matches_hand_multiplication() {
        let d = 3;
        let mut s = store(d, 9);
        let phi = Tensor::from_rows(&[
            vec![1.0, 0.0, 2.0],
            vec![0.0, 1.0, 0.0],
            vec![-1.0, 0.5, 1.0],
        ])
        .unwrap();
        set(&mut s, "pvea.phi_e", phi);
        let q = Tensor::from_rows(&[
            vec![0.5, 0.25, 0.25],
            vec![0.0, 1.0, 0.0],
            vec![0.2, 0.3, 0.5],
        ])
        .unwrap();
        let c = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![0.0, -1.0, 1.0],
            vec![2.0, 0.0, -2.0],
        ])
        .unwrap();
        // c·phi = [[-2, 3.5, 5], [-1, -0.5, 1], [4, -1, 2]]
        let expected = [
            -2.0 * 0.5 - 1.0 * 0.25 + 4.0 * 0.25,
            3.5 * 0.5 - 0.5 * 0.25 - 1.0 * 0.25,
            5.0 * 0.5 + 1.0 * 0.25 + 2.0 * 0.25,
            -1.0,
            -0.5,
            1.0,
            -2.0 * 0.2 - 1.0 * 0.3 + 4.0 * 0.5,
            3.5 * 0.2 - 0.5 * 0.3 - 1.0 * 0.5,
            5.0 * 0.2 + 1.0 * 0.3 + 2.0 * 0.5,
        ];
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let cv = tape.constant(c);
        let e = augment_emotion(&mut tape, &s, qv, cv).unwrap();
        assert!(tape.value(e).data().iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        let (n, d, nw) = (3, 4, 5);
        let s0 = store(d, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [
            rand_tensor(&mut rng, &[n, d]),
            rand_tensor(&mut rng, &[n, d]),
            rand_tensor(&mut rng, &[nw, d]),
        ];
        let eval = |s: &ParamStore, x: &[Tensor; 3], tape: &mut Tape, leaves: bool| {
            let mk = |tape: &mut Tape, t: &Tensor| {
                if leaves {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            let f = mk(tape, &x[0]);
            let v = mk(tape, &x[1]);
            let e0 = mk(tape, &x[2]);
            let out = augment(tape, s, f, v, e0).unwrap();
            (tape.sum(out.emotions), [f, v, e0])
        };
        let mut s = s0.clone();
        let mut tape = Tape::new();
        let (loss, vars) = eval(&s, &inputs, &mut tape, true);
        let grads = tape.backward(loss, &mut s).unwrap();
        for i in 0..3 {
            let fd = finite_difference_grad(
                |p| {
                    let mut x = inputs.clone();
                    x[i] = p.clone();
                    let mut t = Tape::new();
                    let (l, _) = eval(&s0, &x, &mut t, false);
                    t.value(l).item()
                },
                &inputs[i],
                1e-5,
            );
            assert!(relative_error(grads.get(vars[i]).unwrap().data(), fd.data()) < 1e-4);
        }
        for name in ["pvea.phi_f", "pvea.phi_v", "pvea.phi_e"] {
            let id = s0.id(name).unwrap();
            let fd = finite_difference_grad(
                |p| {
                    let mut sp = s0.clone();
                    sp.get_mut(id).value = p.clone();
                    let mut t = Tape::new();
                    let (l, _) = eval(&sp, &inputs, &mut t, false);
                    t.value(l).item()
                },
                &s0.get(id).value,
                1e-5,
            );
            assert!(relative_error(s.get(id).grad.data(), fd.data()) < 1e-4, "{name}");
        }
    }

    #[test]
    fn distribution_is_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = emotion_distribution(&rand_tensor(&mut rng, &[4, 3]), &rand_tensor(&mut rng, &[6, 3]))
            .unwrap();
        assert_eq!(p.len(), 6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn query_rows_are_stochastic_and_emotions_bounded(seed in 0u64..10_000, n in 1usize..6) {
            let d = 3;
            let s = store(d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut tape = Tape::new();
            let f = tape.constant(rand_tensor(&mut rng, &[n, d]));
            let v = tape.constant(rand_tensor(&mut rng, &[n, d]));
            let e0 = tape.constant(rand_tensor(&mut rng, &[5, d]));
            let out = augment(&mut tape, &s, f, v, e0).unwrap();
            let q = tape.value(out.query);
            for r in 0..n {
                prop_assert!(q.row(r).iter().all(|&x| x >= 0.0));
                prop_assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            // E rows lie inside the hull of the projected candidates
            let phi = &s.by_name("pvea.phi_e").unwrap().value;
            let proj = tape.value(out.candidates).matmul(phi).unwrap();
            let e = tape.value(out.emotions);
            for c in 0..d {
                let lo = (0..n).map(|r| proj.get2(r, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..n).map(|r| proj.get2(r, c)).fold(f64::NEG_INFINITY, f64::max);
                for r in 0..n {
                    prop_assert!(e.get2(r, c) >= lo - 1e-12 && e.get2(r, c) <= hi + 1e-12);
                }
            }
        }
    }
}
