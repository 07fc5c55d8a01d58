//! The assembled captioning model: retrieval groups → factual calibration →
//! emotion augmentation → bias routing → query aggregation → decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dbar::{self, RoutingDiagnostics};
use crate::error::{Error, Result};
use crate::fcue;
use crate::generation::{self, decoder_logits, DecoderConfig};
use crate::numerics::params::xavier_uniform;
use crate::numerics::{attention, ParamStore, Tape, Tensor, Var};
use crate::pvea;

/// Which stages are active. Turning one off substitutes the neutral input
/// described on each field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Off: no retrieval groups; a single pseudo-group with `F = V` stands in.
    pub retrieval: bool,
    /// Off: raw triplet features are fused without entropy calibration.
    pub factual_calibration: bool,
    /// Off: emotion features are zero.
    pub emotion_augmentation: bool,
    /// Off: gates fixed to 1 and routes to `1/K`.
    pub bias_adjustment: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { retrieval: true, factual_calibration: true, emotion_augmentation: true, bias_adjustment: true }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self { retrieval: false, factual_calibration: false, emotion_augmentation: false, bias_adjustment: false }
    }

    /// Applies one `--ablate` code: `re`, `fc`, `ea` or `ba`.
    pub fn ablate(&mut self, code: &str) -> Result<()> {
        match code {
            "re" => self.retrieval = false,
            "fc" => self.factual_calibration = false,
            "ea" => self.emotion_augmentation = false,
            "ba" => self.bias_adjustment = false,
            other => return Err(Error::usage(format!("unknown ablation {other:?} (expected re|fc|ea|ba)"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    #[default]
    FactFirst,
    /// Emotion mining runs on the raw projected triplets before calibration.
    EmotionFirst,
}

impl std::str::FromStr for Order {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fact-first" => Ok(Order::FactFirst),
            "emotion-first" => Ok(Order::EmotionFirst),
            other => Err(Error::usage(format!("unknown order {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub n_q: usize,
    pub vocab: usize,
    pub n_w: usize,
    /// Emitted-token limit, `<eos>` included.
    pub max_len: usize,
}

impl ModelDims {
    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig { d: self.d, vocab: self.vocab, max_positions: self.max_len }
    }
}

/// Per-sample inputs that do not depend on parameters.
#[derive(Clone, Debug)]
pub struct SampleContext {
    pub id: String,
    pub frames: Tensor,
    /// Retrieved `3 × d` triplet features with their similarity scores.
    pub groups: Vec<(Tensor, f64)>,
    /// `<bos>` followed by the caption ids.
    pub input: Vec<usize>,
    /// The caption ids followed by `<eos>`.
    pub targets: Vec<usize>,
    /// Dictionary positions of the distinct emotion words in the caption.
    pub emotion_targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub delta: f64,
    pub lambda_e: f64,
    pub lambda_cls: f64,
}

/// Tape handles for one forward pass up to the decoder memory.
pub struct MemoryVars {
    pub m_bar: Var,
    pub emotions: Vec<Var>,
    pub routes: Var,
    pub gates: Option<(Var, Var)>,
}

pub struct LossVars {
    pub emotion_ce: Var,
    pub emotion_cls: Var,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub dims: ModelDims,
    pub toggles: Toggles,
    pub order: Order,
    /// `N_w × d` dictionary embeddings.
    pub dictionary: Tensor,
    /// Emotion flag per vocabulary id.
    pub emotion_flags: Vec<bool>,
}

pub const PARAM_GROUPS: [&str; 6] = ["fcue.", "pvea.", "dbar.", "qformer.", "decoder.", "emo_head."];

impl Model {
    pub fn new(
        dims: ModelDims,
        dictionary: Tensor,
        emotion_flags: Vec<bool>,
        toggles: Toggles,
        order: Order,
        seed: u64,
    ) -> Result<Self> {
        if dims.d == 0 || dims.n_q == 0 || dims.vocab == 0 || dims.max_len == 0 {
            return Err(Error::config(format!("model dimensions must be positive: {dims:?}")));
        }
        if dictionary.shape() != [dims.n_w, dims.d] {
            return Err(Error::config(format!(
                "dictionary is {:?}, expected [{}, {}]",
                dictionary.shape(),
                dims.n_w,
                dims.d
            )));
        }
        if emotion_flags.len() != dims.vocab {
            return Err(Error::config("emotion flags do not cover the vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        fcue::register_params(&mut store, &mut rng, dims.d)?;
        pvea::register_params(&mut store, &mut rng, dims.d)?;
        dbar::register_params(&mut store, &mut rng, dims.d)?;
        generation::register_qformer(&mut store, &mut rng, dims.d, dims.n_q)?;
        generation::register_decoder(&mut store, &mut rng, dims.decoder())?;
        store.insert("emo_head.w", xavier_uniform(&mut rng, dims.d, dims.n_w.max(1)))?;
        store.insert("emo_head.b", Tensor::zeros(&[dims.n_w.max(1)]))?;
        Ok(Self { store, dims, toggles, order, dictionary, emotion_flags })
    }

    /// Runs every stage up to `M̄` for one sample.
    pub fn forward_memory(&self, tape: &mut Tape, ctx: &SampleContext) -> Result<MemoryVars> {
        self.forward_memory_with(tape, &self.store, ctx)
    }

    pub fn forward_memory_with(&self, tape: &mut Tape, store: &ParamStore, ctx: &SampleContext) -> Result<MemoryVars> {
        let d = self.dims.d;
        if ctx.frames.rank() != 2 || ctx.frames.cols() != d || ctx.frames.rows() == 0 {
            return Err(Error::data(format!(
                "sample {} frames are {:?}, expected N×{d}",
                ctx.id,
                ctx.frames.shape()
            )));
        }
        let n = ctx.frames.rows();
        let t = self.toggles;
        let v = tape.constant(ctx.frames.clone());
        let dict = tape.constant(self.dictionary.clone());
        let (factual, hidden, raw_hidden) = if t.retrieval {
            self.factual_groups(tape, store, ctx, v)?
        } else {
            (vec![v], vec![v], vec![v])
        };
        let k = factual.len();
        let emotions: Vec<Var> = if !t.emotion_augmentation || self.dims.n_w == 0 {
            (0..k).map(|_| tape.constant(Tensor::zeros(&[n, d]))).collect()
        } else {
            let sources = match self.order {
                Order::FactFirst => &factual,
                Order::EmotionFirst => &raw_hidden,
            };
            sources
                .iter()
                .map(|&f| pvea::augment(tape, store, f, v, dict).map(|e| e.emotions))
                .collect::<Result<_>>()?
        };
        let (routes, gates) = if t.bias_adjustment {
            let gates = dbar::compute_gates(tape, store, &factual, &emotions)?;
            (dbar::compute_routes(tape, store, &hidden)?, Some(gates))
        } else {
            (dbar::uniform_routes(tape, k), None)
        };
        let m = dbar::aggregate(tape, &factual, &emotions, routes, gates)?;
        let m_bar = generation::qformer_aggregate(tape, store, m, v)?;
        Ok(MemoryVars { m_bar, emotions, routes, gates })
    }

    /// `(F_i, H_i, raw H_i)` per retrieval group. The raw expert features use
    /// uncalibrated triplets and feed emotion mining in emotion-first order.
    fn factual_groups(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &SampleContext,
        v: Var,
    ) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
        let k = ctx.groups.len();
        if k == 0 {
            return Err(Error::config(format!("sample {} has no retrieval groups", ctx.id)));
        }
        let d = self.dims.d;
        let mut stacked = Vec::with_capacity(k * 3 * d);
        for (g, _) in &ctx.groups {
            if g.shape() != [3, d] {
                return Err(Error::data(format!("triplet features {:?}, expected [3, {d}]", g.shape())));
            }
            stacked.extend_from_slice(g.data());
        }
        let raw = tape.constant(Tensor::new(vec![k, 3, d], stacked)?);
        let calibrated = if self.toggles.factual_calibration {
            let sr = fcue::self_refine_var(tape, raw)?;
            let sims: Vec<f64> = ctx.groups.iter().map(|(_, s)| *s).collect();
            let (_, theta) = fcue::cross_weights(&sims)?;
            fcue::cross_refine_var(tape, sr.refined, &theta)?
        } else {
            raw
        };
        let (mut factual, mut hidden, mut raw_hidden) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..k {
            let ti = tape.narrow(calibrated, 0, i, 1)?;
            let ti = tape.reshape(ti, &[3, d])?;
            let (h, f) = fcue::fuse_factual(tape, store, v, ti)?;
            factual.push(f);
            hidden.push(h);
            if self.order == Order::EmotionFirst {
                let ri = tape.narrow(raw, 0, i, 1)?;
                let ri = tape.reshape(ri, &[3, d])?;
                let w_t = tape.param_named(store, "fcue.w_t")?;
                let p = tape.matmul(ri, w_t)?;
                raw_hidden.push(attention(tape, v, p, p, None)?);
            }
        }
        Ok((factual, hidden, raw_hidden))
    }

    /// Teacher-forced total loss for one sample.
    pub fn sample_loss(&self, tape: &mut Tape, ctx: &SampleContext, w: &LossWeights) -> Result<LossVars> {
        self.sample_loss_with(tape, &self.store, ctx, w)
    }

    pub fn sample_loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &SampleContext,
        w: &LossWeights,
    ) -> Result<LossVars> {
        let mem = self.forward_memory_with(tape, store, ctx)?;
        let logits = decoder_logits(tape, store, &self.dims.decoder(), mem.m_bar, &ctx.input)?;
        let emotion_ce =
            crate::training::emotion_focused_ce(tape, logits, &ctx.targets, &self.emotion_flags, w.delta, Some(0))?;
        let emotion_cls = crate::training::emotion_cls_loss(tape, store, &mem.emotions, mem.routes, &ctx.emotion_targets)?;
        let total = crate::training::total_loss(tape, emotion_ce, emotion_cls, w.lambda_e, w.lambda_cls)?;
        Ok(LossVars { emotion_ce, emotion_cls, total })
    }

    /// `M̄` as a plain tensor, plus gate/route diagnostics.
    pub fn memory(&self, ctx: &SampleContext) -> Result<(Tensor, RoutingDiagnostics)> {
        let mut tape = Tape::new();
        let mem = self.forward_memory(&mut tape, ctx)?;
        let (gf, ge) = match mem.gates {
            Some((f, e)) => (tape.value(f).item(), tape.value(e).item()),
            None => (1.0, 1.0),
        };
        let diag = RoutingDiagnostics {
            gate_factual: gf,
            gate_emotional: ge,
            routes: tape.value(mem.routes).data().to_vec(),
        };
        Ok((tape.value(mem.m_bar).clone(), diag))
    }
}
