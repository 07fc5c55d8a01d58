//! Factual calibration via uncertainty estimation.
//!
//! Triplet components are reweighted by their softmax entropy
//! (self-refinement), whole triplets by the entropy contribution of their share
//! of the retrieval similarity mass (cross-refinement), and the calibrated
//! triplets are fused with the video frames by attention, a feed-forward map
//! and layer normalisation.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::xavier_uniform;
use crate::numerics::{attention, ffn, layer_norm, ParamStore, Tape, Tensor, Var};

/// Floor applied to retrieval scores before they are read as probabilities.
pub const SIMILARITY_FLOOR: f64 = 1e-6;

/// Entropy-based per-component weights `alpha` (`K × 3`) and refined
/// triplets `T' = alpha ⊙ T` (`K × 3 × d`).
#[derive(Clone, Debug)]
pub struct SelfRefinement {
    pub entropy: Tensor,
    pub alpha: Tensor,
    pub refined: Tensor,
}

/// Similarity-mass probabilities `p`, cross weights `theta` and calibrated
/// triplets `T̄ = theta ⊙ T'`.
#[derive(Clone, Debug)]
pub struct CrossRefinement {
    pub p: Vec<f64>,
    pub theta: Vec<f64>,
    pub calibrated: Tensor,
}

/// Tape handles produced by [`self_refine_var`].
pub struct SelfRefineVars {
    pub entropy: Var,
    pub alpha: Var,
    pub refined: Var,
}

fn check_triplets(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[1] != 3 || shape[0] == 0 || shape[2] < 2 {
        return Err(Error::usage(format!(
            "triplet features must be K×3×d with K ≥ 1 and d ≥ 2, got {shape:?}"
        )));
    }
    Ok(())
}

/// Self-refinement on the tape. `t` is `K × 3 × d`.
pub fn self_refine_var(tape: &mut Tape, t: Var) -> Result<SelfRefineVars> {
    check_triplets(tape.shape(t))?;
    let p = tape.softmax(t, 2)?;
    let logp = tape.log_softmax(t, 2)?;
    let plogp = tape.mul(p, logp)?;
    let neg_h = tape.sum_axis(plogp, 2)?; // K×3×1
    let entropy = tape.neg(neg_h);
    let total = tape.sum_axis(entropy, 1)?; // K×1×1
    let alpha = tape.div(entropy, total)?;
    let refined = tape.mul(t, alpha)?;
    Ok(SelfRefineVars { entropy, alpha, refined })
}

pub fn self_refine(t: &Tensor) -> Result<SelfRefinement> {
    if !t.is_finite() {
        return Err(Error::NonFinite("triplet features".into()));
    }
    let mut tape = Tape::new();
    let tv = tape.constant(t.clone());
    let vars = self_refine_var(&mut tape, tv)?;
    let k = t.shape()[0];
    Ok(SelfRefinement {
        entropy: tape.value(vars.entropy).reshape(&[k, 3])?,
        alpha: tape.value(vars.alpha).reshape(&[k, 3])?,
        refined: tape.value(vars.refined).clone(),
    })
}

/// Cross-triplet weights from retrieval similarities.
///
/// `s_i = max(sim_i, 1e-6)`, `p_i = s_i / Σ s`, and
/// `theta_i = −p_i ln p_i / Σ_j (−p_j ln p_j)`; a single group gets `[1]`.
pub fn cross_weights(sims: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sims.is_empty() {
        return Err(Error::usage("cross refinement needs at least one group"));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::usage("non-finite similarity score"));
    }
    let clamped: Vec<f64> = sims.iter().map(|s| s.max(SIMILARITY_FLOOR)).collect();
    let total: f64 = clamped.iter().sum();
    let p: Vec<f64> = clamped.iter().map(|s| s / total).collect();
    if p.len() == 1 {
        return Ok((p, vec![1.0]));
    }
    let contrib: Vec<f64> = p.iter().map(|&pi| if pi > 0.0 { -pi * pi.ln() } else { 0.0 }).collect();
    let z: f64 = contrib.iter().sum();
    let theta = if z > 0.0 {
        contrib.iter().map(|c| c / z).collect()
    } else {
        vec![1.0 / p.len() as f64; p.len()]
    };
    Ok((p, theta))
}

/// Applies `theta` to `K × 3 × d` features on the tape.
pub fn cross_refine_var(tape: &mut Tape, refined: Var, theta: &[f64]) -> Result<Var> {
    let k = tape.shape(refined)[0];
    if theta.len() != k {
        return Err(Error::usage(format!("{} cross weights for {k} groups", theta.len())));
    }
    let w = tape.constant(Tensor::new(vec![k, 1, 1], theta.to_vec())?);
    tape.mul(refined, w)
}

pub fn cross_refine(refined: &Tensor, sims: &[f64]) -> Result<CrossRefinement> {
    check_triplets(refined.shape())?;
    let (p, theta) = cross_weights(sims)?;
    let mut tape = Tape::new();
    let r = tape.constant(refined.clone());
    let out = cross_refine_var(&mut tape, r, &theta)?;
    Ok(CrossRefinement { p, theta, calibrated: tape.value(out).clone() })
}

/// Registers `fcue.w_t`, `fcue.ffn.{w1,b1,w2,b2}` and `fcue.ln.{gain,bias}`.
pub fn register_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Result<()> {
    store.insert("fcue.w_t", xavier_uniform(rng, d, d))?;
    store.insert("fcue.ffn.w1", xavier_uniform(rng, 2 * d, 2 * d))?;
    store.insert("fcue.ffn.b1", Tensor::zeros(&[2 * d]))?;
    store.insert("fcue.ffn.w2", xavier_uniform(rng, 2 * d, d))?;
    store.insert("fcue.ffn.b2", Tensor::zeros(&[d]))?;
    store.insert("fcue.ln.gain", Tensor::full(&[d], 1.0))?;
    store.insert("fcue.ln.bias", Tensor::zeros(&[d]))?;
    Ok(())
}

/// Expert fusion of one calibrated triplet (`3 × d`) with frames `v` (`N × d`).
///
/// `H = Attn(Q = V, K = V = T̄ W_T)` and `F = LayerNorm(FFN([V ; H]) + V)`
/// with the concatenation along the feature axis. Returns `(H, F)`.
pub fn fuse_factual(tape: &mut Tape, store: &ParamStore, v: Var, calibrated: Var) -> Result<(Var, Var)> {
    let (vs, ts) = (tape.shape(v).to_vec(), tape.shape(calibrated).to_vec());
    if vs.len() != 2 || ts.len() != 2 || vs[1] != ts[1] {
        return Err(Error::usage(format!(
            "fuse_factual shape mismatch: frames {vs:?}, triplet {ts:?}"
        )));
    }
    let w_t = tape.param_named(store, "fcue.w_t")?;
    let projected = tape.matmul(calibrated, w_t)?;
    let hidden = attention(tape, v, projected, projected, None)?;
    let joined = tape.concat(&[v, hidden], 1)?;
    let mapped = ffn(tape, store, "fcue.ffn", joined)?;
    let residual = tape.add(mapped, v)?;
    let gain = tape.param_named(store, "fcue.ln.gain")?;
    let bias = tape.param_named(store, "fcue.ln.bias")?;
    let factual = layer_norm(tape, residual, 1, gain, bias)?;
    Ok((hidden, factual))
}
