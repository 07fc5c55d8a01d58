//! Composite differentiable operators shared by every stage of the pipeline.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive mask value for disallowed attention positions. Finite so every
/// intermediate stays finite; `exp` of it underflows to exactly zero.
pub const MASK_VALUE: f64 = -1e9;

/// Scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d)) V`.
///
/// `mask`, when given, is added to the score matrix before the softmax.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::usage(format!(
            "attention shape mismatch: Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    if ks[0] == 0 {
        return Err(Error::usage("attention needs at least one key"));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

/// Lower-triangular causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.data_mut()[i * n + j] = MASK_VALUE;
        }
    }
    m
}

/// Layer normalisation over `axis` with learnable `gain` and `bias`, both of
/// length equal to that axis.
pub fn layer_norm(tape: &mut Tape, x: Var, axis: usize, gain: Var, bias: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let len = *shape
        .get(axis)
        .ok_or_else(|| Error::usage(format!("axis {axis} out of range for {shape:?}")))?;
    if len == 0 {
        return Err(Error::usage("layer norm over a zero-length axis"));
    }
    if tape.value(gain).len() != len || tape.value(bias).len() != len {
        return Err(Error::usage(format!(
            "layer norm gain/bias must have length {len}, got {} and {}",
            tape.value(gain).len(),
            tape.value(bias).len()
        )));
    }
    let mean = tape.mean_axis(x, axis)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, axis)?;
    let eps = tape.constant(Tensor::scalar(LAYER_NORM_EPS));
    let var_eps = tape.add(var, eps)?;
    let std = tape.sqrt(var_eps);
    let normed = tape.div(centered, std)?;

    // Align gain/bias with `axis` under right-aligned broadcasting.
    let mut bshape = vec![1; shape.len() - axis];
    bshape[0] = len;
    let g = tape.reshape(gain, &bshape)?;
    let b = tape.reshape(bias, &bshape)?;
    let scaled = tape.mul(normed, g)?;
    tape.add(scaled, b)
}

/// `x W + b` for a row-major batch `x`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Two-layer tanh feed-forward map `tanh(x W1 + b1) W2 + b2` whose
/// parameters live under `{prefix}.w1`, `.b1`, `.w2`, `.b2`.
pub fn ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param_named(store, &format!("{prefix}.w1"))?;
    let b1 = tape.param_named(store, &format!("{prefix}.b1"))?;
    let w2 = tape.param_named(store, &format!("{prefix}.w2"))?;
    let b2 = tape.param_named(store, &format!("{prefix}.b2"))?;
    let h = linear(tape, x, w1, Some(b1))?;
    let h = tape.tanh(h);
    linear(tape, h, w2, Some(b2))
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.softmax(axis)
}

/// Parameter-free cross-attention on plain tensors.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = attention(&mut tape, q, k, v, None)?;
    Ok(tape.value(out).clone())
}

/// Layer normalisation on plain tensors.
pub fn layer_norm_tensor(x: &Tensor, axis: usize, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let b = tape.constant(bias.clone());
    let out = layer_norm(&mut tape, x, axis, g, b)?;
    Ok(tape.value(out).clone())
}
