use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::search::StepScorer;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::params::{normal_init, xavier_uniform};
use crate::numerics::{attention, causal_mask, ffn, layer_norm, linear, ParamStore, Tape, Tensor, Var};

/// Sizes of the single-block decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d: usize,
    pub vocab: usize,
    /// Longest input sequence, `<bos>` included.
    pub max_positions: usize,
}

pub fn register_decoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: DecoderConfig) -> Result<()> {
    let d = cfg.d;
    store.insert("decoder.tok_emb", normal_init(rng, &[cfg.vocab, d], 0.02))?;
    store.insert("decoder.pos_emb", normal_init(rng, &[cfg.max_positions, d], 0.02))?;
    for block in ["self", "cross"] {
        for m in ["wq", "wk", "wv"] {
            store.insert(format!("decoder.{block}.{m}"), xavier_uniform(rng, d, d))?;
        }
    }
    store.insert("decoder.ffn.w1", xavier_uniform(rng, d, 2 * d))?;
    store.insert("decoder.ffn.b1", Tensor::zeros(&[2 * d]))?;
    store.insert("decoder.ffn.w2", xavier_uniform(rng, 2 * d, d))?;
    store.insert("decoder.ffn.b2", Tensor::zeros(&[d]))?;
    for ln in ["ln1", "ln2", "ln3"] {
        store.insert(format!("decoder.{ln}.gain"), Tensor::full(&[d], 1.0))?;
        store.insert(format!("decoder.{ln}.bias"), Tensor::zeros(&[d]))?;
    }
    store.insert("decoder.out.w", xavier_uniform(rng, d, cfg.vocab))?;
    store.insert("decoder.out.b", Tensor::zeros(&[cfg.vocab]))?;
    Ok(())
}

fn block_attention(tape: &mut Tape, store: &ParamStore, block: &str, x: Var, kv: Var, mask: Option<Var>) -> Result<Var> {
    let wq = tape.param_named(store, &format!("decoder.{block}.wq"))?;
    let wk = tape.param_named(store, &format!("decoder.{block}.wk"))?;
    let wv = tape.param_named(store, &format!("decoder.{block}.wv"))?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    attention(tape, q, k, v, mask)
}

fn norm(tape: &mut Tape, store: &ParamStore, ln: &str, x: Var) -> Result<Var> {
    let g = tape.param_named(store, &format!("decoder.{ln}.gain"))?;
    let b = tape.param_named(store, &format!("decoder.{ln}.bias"))?;
    layer_norm(tape, x, 1, g, b)
}

/// Logits (`T × vocab`) for every position of `input`; row `t` predicts the
/// token after `input[t]` and sees only `input[..=t]` and `m_bar`.
pub fn decoder_logits(tape: &mut Tape, store: &ParamStore, cfg: &DecoderConfig, m_bar: Var, input: &[usize]) -> Result<Var> {
    let t = input.len();
    if t == 0 || t > cfg.max_positions {
        return Err(Error::usage(format!(
            "decoder input length {t} outside 1..={}",
            cfg.max_positions
        )));
    }
    if tape.shape(m_bar).len() != 2 || tape.shape(m_bar)[1] != cfg.d {
        return Err(Error::usage(format!("decoder memory shape {:?}", tape.shape(m_bar))));
    }
    let tok = tape.param_named(store, "decoder.tok_emb")?;
    let pos = tape.param_named(store, "decoder.pos_emb")?;
    let x = tape.gather(tok, input)?;
    let p = tape.narrow(pos, 0, 0, t)?;
    let x = tape.add(x, p)?;
    let mask = tape.constant(causal_mask(t));
    let s = block_attention(tape, store, "self", x, x, Some(mask))?;
    let h = tape.add(x, s)?;
    let h = norm(tape, store, "ln1", h)?;
    let c = block_attention(tape, store, "cross", h, m_bar, None)?;
    let h = tape.add(h, c)?;
    let h = norm(tape, store, "ln2", h)?;
    let f = ffn(tape, store, "decoder.ffn", h)?;
    let h = tape.add(h, f)?;
    let h = norm(tape, store, "ln3", h)?;
    let w = tape.param_named(store, "decoder.out.w")?;
    let b = tape.param_named(store, "decoder.out.b")?;
    linear(tape, h, w, Some(b))
}

/// Drives search with a trained decoder and a fixed `M̄`.
pub struct ModelScorer<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a DecoderConfig,
    pub vocab: &'a Vocabulary,
    pub m_bar: &'a Tensor,
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn bos(&self) -> usize {
        self.vocab.bos()
    }

    fn eos(&self) -> usize {
        self.vocab.eos()
    }

    fn allowed(&self, token: usize) -> bool {
        token == self.vocab.eos() || !self.vocab.is_special(token)
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let m = tape.constant(self.m_bar.clone());
        let logits = decoder_logits(&mut tape, self.store, self.cfg, m, prefix)?;
        let last = tape.narrow(logits, 0, prefix.len() - 1, 1)?;
        let lp = tape.log_softmax(last, 1)?;
        Ok(tape.value(lp).data().to_vec())
    }
}
