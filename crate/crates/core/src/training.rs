//! Losses, the Adam optimiser, the mini-batch training loop and the
//! whole-model finite-difference check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingTable, EmotionDictionary};
use crate::error::{Error, Result};
use crate::generation::Vocabulary;
use crate::model::{LossWeights, Model, ModelDims, Order, SampleContext, Toggles, PARAM_GROUPS};
use crate::numerics::{finite_difference_grad, relative_error, ParamStore, Tape, Tensor, Var};
use crate::retrieval::RetrievalIndex;

/// `Σ_t w_t · −log P(y_t | y_<t)` with `w_t = 1 + δ` on emotion-flagged
/// targets, 1 elsewhere, and 0 on `pad`.
pub fn emotion_focused_ce(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    emotion_flags: &[bool],
    delta: f64,
    pad: Option<usize>,
) -> Result<Var> {
    if !(delta >= 0.0) {
        return Err(Error::usage(format!("emotion penalty must be ≥ 0, got {delta}")));
    }
    let vocab = emotion_flags.len();
    let mut weights = Vec::with_capacity(targets.len());
    for &y in targets {
        if y >= vocab {
            return Err(Error::usage(format!("target {y} outside vocabulary of {vocab}")));
        }
        weights.push(if Some(y) == pad {
            0.0
        } else if emotion_flags[y] {
            1.0 + delta
        } else {
            1.0
        });
    }
    tape.weighted_cross_entropy(logits, targets, &weights)
}

/// `−Σ_e log P(e)` where `P = softmax(mean_frames(Σ_i g_i E_i) W + b)` over
/// the dictionary. An empty target set gives 0.
pub fn emotion_cls_loss(tape: &mut Tape, store: &ParamStore, emotions: &[Var], routes: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let k = emotions.len();
    if k == 0 || tape.value(routes).len() != k {
        return Err(Error::usage(format!("{k} emotion groups for {} routes", tape.value(routes).len())));
    }
    let w = tape.param_named(store, "emo_head.w")?;
    let n_w = tape.shape(w)[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_w) {
        return Err(Error::usage(format!("emotion target {bad} outside dictionary of {n_w}")));
    }
    let routes = tape.reshape(routes, &[k, 1])?;
    let mut acc: Option<Var> = None;
    for (i, &e) in emotions.iter().enumerate() {
        let gi = tape.narrow(routes, 0, i, 1)?;
        let term = tape.mul(e, gi)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let pooled = tape.mean_axis(acc.expect("k ≥ 1"), 0)?;
    let b = tape.param_named(store, "emo_head.b")?;
    let logits = crate::numerics::linear(tape, pooled, w, Some(b))?;
    let rows = vec![logits; targets.len()];
    let stacked = tape.concat(&rows, 0)?;
    tape.weighted_cross_entropy(stacked, targets, &vec![1.0; targets.len()])
}

pub fn total_loss(tape: &mut Tape, l_e: Var, l_cls: Var, lambda_e: f64, lambda_cls: f64) -> Result<Var> {
    if !(lambda_e >= 0.0 && lambda_cls >= 0.0) {
        return Err(Error::usage("loss weights must be ≥ 0"));
    }
    let a = tape.scale(l_e, lambda_e);
    let b = tape.scale(l_cls, lambda_cls);
    tape.add(a, b)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One bias-corrected update of every parameter from its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(Error::usage("optimiser state does not match the parameter set"));
        }
        for (p, m) in store.iter().zip(&self.m) {
            if p.grad.shape() != p.value.shape() || m.shape() != p.value.shape() {
                return Err(Error::usage(format!("gradient shape mismatch for {}", p.name)));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub delta: f64,
    pub lambda_e: f64,
    pub lambda_cls: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub k: usize,
    pub order: Order,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Stop early once the batch loss falls below this.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            lambda_e: 1.0,
            lambda_cls: 0.1,
            lr: 7e-4,
            batch_size: 32,
            max_steps: 2000,
            seed: 0,
            toggles: Toggles::default(),
            k: 4,
            order: Order::FactFirst,
            checkpoint_every: 0,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { delta: self.delta, lambda_e: self.lambda_e, lambda_cls: self.lambda_cls }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.lambda_e >= 0.0 && self.lambda_cls >= 0.0) {
            return Err(Error::config("delta, lambda_e and lambda_cls must be ≥ 0"));
        }
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::config("k and batch_size must be ≥ 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub step: usize,
    pub emotion_ce: f64,
    pub emotion_cls: f64,
    pub total: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,L_e,L_cls,L\n");
    for r in rows {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.emotion_ce, r.emotion_cls, r.total));
    }
    out
}

/// Batch-mean loss and its gradient accumulated into `model.store`.
/// Samples are processed in the given order so the sum is reproducible.
pub fn batch_gradient(model: &mut Model, batch: &[&SampleContext], w: &LossWeights) -> Result<LossRow> {
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut row = LossRow { step: 0, emotion_ce: 0.0, emotion_cls: 0.0, total: 0.0 };
    for ctx in batch {
        let mut tape = Tape::new();
        let l = model.sample_loss(&mut tape, ctx, w)?;
        let total = tape.value(l.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss for sample {}", ctx.id)));
        }
        row.emotion_ce += scale * tape.value(l.emotion_ce).item();
        row.emotion_cls += scale * tape.value(l.emotion_cls).item();
        row.total += scale * total;
        let scaled = tape.scale(l.total, scale);
        tape.backward(scaled, &mut model.store)?;
    }
    Ok(row)
}

/// Mini-batch Adam training. Batches come from a seeded per-epoch shuffle.
/// `on_step` sees every loss row and the model after its update; returning
/// an error aborts.
pub fn train_loop(
    model: &mut Model,
    contexts: &[SampleContext],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRow, &Model) -> Result<()>,
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    if contexts.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let w = cfg.weights();
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e);
    let bs = cfg.batch_size.min(contexts.len());
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    let mut cursor = contexts.len();
    let mut history = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&SampleContext> = order[cursor..cursor + bs].iter().map(|&i| &contexts[i]).collect();
        cursor += bs;
        let mut row = batch_gradient(model, &batch, &w)?;
        row.step = step;
        adam.step(&mut model.store)?;
        log::debug!("step {step} loss {:.6}", row.total);
        on_step(&row, model)?;
        history.push(row);
        if cfg.target_loss.is_some_and(|t| row.total < t) {
            break;
        }
    }
    Ok(history)
}

/// Borrowed inputs for turning samples into [`SampleContext`]s.
pub struct ContextBuilder<'a> {
    pub table: &'a EmbeddingTable,
    pub dictionary: &'a EmotionDictionary,
    pub vocab: &'a Vocabulary,
    pub index: Option<&'a RetrievalIndex>,
    pub k: usize,
    pub prefix: &'a str,
    pub max_len: usize,
}

impl ContextBuilder<'_> {
    /// Retrieves (leave-one-video-out) and encodes groups, and maps the
    /// caption to ids. Captions longer than `max_len − 1` are truncated so
    /// `<eos>` fits.
    pub fn build(&self, id: &str, video_id: &str, frames: &Tensor, caption: &[String]) -> Result<SampleContext> {
        let groups = match self.index {
            Some(index) => {
                let query = frames.mean_rows();
                index
                    .retrieve_groups(&query, self.k, Some(video_id), self.prefix, self.table)?
                    .into_iter()
                    .map(|g| (g.components, g.score))
                    .collect()
            }
            None => Vec::new(),
        };
        let keep = caption.len().min(self.max_len.saturating_sub(1));
        let ids = self.vocab.encode(&caption[..keep]);
        let mut input = vec![self.vocab.bos()];
        input.extend_from_slice(&ids);
        let mut targets = ids;
        targets.push(self.vocab.eos());
        let emotion_targets = self
            .dictionary
            .words_in(&caption[..keep])
            .iter()
            .filter_map(|w| self.dictionary.position(w))
            .collect();
        Ok(SampleContext {
            id: id.to_string(),
            frames: frames.clone(),
            groups,
            input,
            targets,
            emotion_targets,
        })
    }
}

/// Relative error of one parameter group in the whole-model check.
#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub params: usize,
    pub values: usize,
    pub relative_error: f64,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// The small configuration: d=8, N=4, K=2, N_w=6, N_q=4, vocabulary 20.
pub fn small_gradcheck_setup(seed: u64, order: Order, toggles: Toggles) -> Result<(Model, Vec<SampleContext>)> {
    let (d, n, k, n_q) = (8, 4, 2, 4);
    let table = EmbeddingTable::deterministic(d, seed);
    let emotion_words = ["happily", "sadly", "angrily", "joyful", "gloomy", "calm"];
    let dictionary = EmotionDictionary::new(&emotion_words, &table)?;
    let plain: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(plain.iter().map(String::as_str).chain(emotion_words), &dictionary);
    debug_assert_eq!(vocab.len(), 20);
    let dims = ModelDims { d, n_q, vocab: vocab.len(), n_w: dictionary.len(), max_len: 6 };
    let mut model = Model::new(
        dims,
        dictionary.embeddings().clone(),
        vocab.emotion_flags().to_vec(),
        toggles,
        order,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    // Non-zero biases so every parameter carries a generic gradient.
    for p in model.store.iter_mut() {
        if p.name.ends_with(".b") || p.name.contains(".b_") || p.name.ends_with("b1") || p.name.ends_with("b2") || p.name.ends_with(".bias") {
            for x in p.value.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    let mut rand = |shape: &[usize]| {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let captions = [
        vec!["w1", "happily", "w3", "w4"],
        vec!["w2", "w5", "sadly", "calm", "w9"],
    ];
    let mut contexts = Vec::new();
    for (i, cap) in captions.iter().enumerate() {
        let groups = (0..k)
            .map(|g| Ok((rand(&[3, d])?, 0.2 + 0.3 * g as f64 + 0.1 * i as f64)))
            .collect::<Result<Vec<_>>>()?;
        let ids = vocab.encode(cap);
        let mut input = vec![vocab.bos()];
        input.extend_from_slice(&ids);
        let mut targets = ids;
        targets.push(vocab.eos());
        let tokens: Vec<String> = cap.iter().map(|s| s.to_string()).collect();
        contexts.push(SampleContext {
            id: format!("s{i}"),
            frames: rand(&[n, d])?,
            groups,
            input,
            targets,
            emotion_targets: dictionary.words_in(&tokens).iter().filter_map(|w| dictionary.position(w)).collect(),
        });
    }
    Ok((model, contexts))
}

/// Compares the batch-loss gradient against central differences for every
/// parameter, reporting a norm-wise relative error per parameter group.
pub fn gradcheck(model: &Model, contexts: &[SampleContext], w: &LossWeights) -> Result<Vec<GroupCheck>> {
    let loss_at = |store: &ParamStore| -> f64 {
        let mut total = 0.0;
        for ctx in contexts {
            let mut tape = Tape::new();
            let l = model.sample_loss_with(&mut tape, store, ctx, w).expect("forward succeeds");
            total += tape.value(l.total).item();
        }
        total / contexts.len() as f64
    };
    let mut analytic = model.clone();
    let refs: Vec<&SampleContext> = contexts.iter().collect();
    batch_gradient(&mut analytic, &refs, w)?;
    let mut out = Vec::new();
    for group in PARAM_GROUPS {
        let ids = model.store.group(group);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &id in &ids {
            let base = &model.store.get(id).value;
            let fd = finite_difference_grad(
                |p| {
                    let mut s = model.store.clone();
                    s.get_mut(id).value = p.clone();
                    loss_at(&s)
                },
                base,
                GRADCHECK_STEP,
            );
            a.extend_from_slice(analytic.store.get(id).grad.data());
            n.extend_from_slice(fd.data());
        }
        out.push(GroupCheck {
            group: group.trim_end_matches('.').to_string(),
            params: ids.len(),
            values: a.len(),
            relative_error: relative_error(&a, &n),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use proptest::prelude::{prop_assert, proptest};

    fn logits_with_prob(p: f64, vocab: usize, target: usize) -> Tensor {
        // target gets probability p, the rest share 1 − p evenly.
        let rest = (1.0 - p) / (vocab - 1) as f64;
        let row: Vec<f64> = (0..vocab).map(|i| if i == target { p.ln() } else { rest.ln() }).collect();
        Tensor::new(vec![1, vocab], row).unwrap()
    }

    fn ce(logits: &Tensor, targets: &[usize], flags: &[bool], delta: f64) -> f64 {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let v = emotion_focused_ce(&mut tape, l, targets, flags, delta, Some(0)).unwrap();
        tape.value(v).item()
    }

    #[test]
    fn single_token_fixtures() {
        let flags = [false, true, false];
        let l = logits_with_prob(0.5, 3, 1);
        assert!((ce(&l, &[1], &flags, 0.1) - 0.762462).abs() < 1e-6);
        let l = logits_with_prob(0.5, 3, 2);
        assert!((ce(&l, &[2], &flags, 0.1) - 0.693147).abs() < 1e-6);
        assert!((ce(&l, &[2], &flags, 0.1) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pad_steps_and_oov_targets() {
        let flags = [false, true, false];
        let l = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 0.5]]).unwrap();
        let with_pad = ce(&l, &[2, 0], &flags, 0.0);
        let only = ce(&Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap(), &[2], &flags, 0.0);
        assert_eq!(with_pad, only);
        let mut tape = Tape::new();
        let lv = tape.constant(l);
        assert!(emotion_focused_ce(&mut tape, lv, &[2, 3], &flags, 0.0, None).is_err());
        assert!(emotion_focused_ce(&mut tape, lv, &[2, 1], &flags, -0.1, None).is_err());
    }

    fn cls_setup(bias: Vec<f64>) -> (ParamStore, Tape, Vec<Var>, Var) {
        let n_w = bias.len();
        let mut store = ParamStore::new();
        store.insert("emo_head.w", Tensor::zeros(&[3, n_w])).unwrap();
        store.insert("emo_head.b", Tensor::vector(bias)).unwrap();
        let mut tape = Tape::new();
        let e = vec![tape.constant(Tensor::full(&[2, 3], 0.4)), tape.constant(Tensor::full(&[2, 3], -0.2))];
        let g = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        (store, tape, e, g)
    }

    #[test]
    fn classification_fixtures() {
        let (store, mut tape, e, g) = cls_setup(vec![0.0; 4]);
        let l = emotion_cls_loss(&mut tape, &store, &e, g, &[]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let l = emotion_cls_loss(&mut tape, &store, &e, g, &[2]).unwrap();
        assert!((tape.value(l).item() - 1.386294).abs() < 1e-6);

        let (store, mut tape, e, g) = cls_setup(vec![0.5f64.ln(), 0.25f64.ln(), 0.125f64.ln(), 0.125f64.ln()]);
        let l = emotion_cls_loss(&mut tape, &store, &e, g, &[0, 1]).unwrap();
        assert!((tape.value(l).item() - 2.079442).abs() < 1e-6);
        assert!(emotion_cls_loss(&mut tape, &store, &e, g, &[4]).is_err());
    }

    #[test]
    fn total_loss_fixtures() {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(Tensor::scalar(2.0)), tape.constant(Tensor::scalar(4.0)));
        let t = total_loss(&mut tape, a, b, 1.0, 0.5).unwrap();
        assert_eq!(tape.value(t).item(), 4.0);
        let t = total_loss(&mut tape, a, b, 1.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 2.0);
        let t = total_loss(&mut tape, a, b, 0.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
    }

    #[test]
    fn adam_first_step() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::full(&[3], 1.0)).unwrap();
        let id2 = store.insert("y", Tensor::full(&[2], 5.0)).unwrap();
        store.get_mut(id).grad = Tensor::full(&[3], 1.0);
        let mut adam = Adam::new(7e-4);
        adam.step(&mut store).unwrap();
        for &x in store.get(id).value.data() {
            assert!((x - 1.0 - (-6.99999e-4)).abs() < 1e-9);
            // closed form: −lr · 1 / (1 + ε)
            assert!((x - 1.0 + 7e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        }
        assert_eq!(store.get(id2).value.data(), &[5.0, 5.0]);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let (mut model, ctxs) = small_gradcheck_setup(3, Order::FactFirst, Toggles::default()).unwrap();
        let before = model.store.clone();
        let cfg = TrainConfig { lambda_e: 0.0, lambda_cls: 0.0, max_steps: 3, ..TrainConfig::default() };
        let hist = train_loop(&mut model, &ctxs, &cfg, |_, _| Ok(())).unwrap();
        assert!(hist.iter().all(|r| r.total == 0.0));
        for (a, b) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, ctxs) = small_gradcheck_setup(4, Order::FactFirst, Toggles::default()).unwrap();
            let cfg = TrainConfig { max_steps: 5, batch_size: 1, ..TrainConfig::default() };
            let h = train_loop(&mut model, &ctxs, &cfg, |_, _| Ok(())).unwrap();
            (loss_csv(&h), model.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        for (x, y) in sa.iter().zip(sb.iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (mut model, _) = small_gradcheck_setup(5, Order::FactFirst, Toggles::default()).unwrap();
        assert!(train_loop(&mut model, &[], &TrainConfig::default(), |_, _| Ok(())).is_err());
    }

    #[test]
    fn all_off_baseline_has_no_pipeline_gradient() {
        let (mut model, ctxs) = small_gradcheck_setup(6, Order::FactFirst, Toggles::all_off()).unwrap();
        let refs: Vec<&SampleContext> = ctxs.iter().collect();
        batch_gradient(&mut model, &refs, &TrainConfig::default().weights()).unwrap();
        for p in model.store.iter() {
            let zero = p.grad.data().iter().all(|&g| g == 0.0);
            let pipeline = ["fcue.", "pvea.", "dbar."].iter().any(|g| p.name.starts_with(g));
            if pipeline {
                assert!(zero, "{} has gradient", p.name);
            }
        }
        assert!(model.store.group("decoder.").iter().any(|&id| model.store.get(id).grad.data().iter().any(|&g| g != 0.0)));
        // And the loss ignores retrieval content entirely.
        let mut changed = ctxs.clone();
        for c in &mut changed {
            for (t, s) in &mut c.groups {
                *t = t.map(|x| 3.0 * x + 1.0);
                *s = 0.01;
            }
        }
        let loss = |cs: &[SampleContext]| {
            let mut tape = Tape::new();
            let l = model.sample_loss(&mut tape, &cs[0], &TrainConfig::default().weights()).unwrap();
            tape.value(l.total).item()
        };
        assert_eq!(loss(&ctxs), loss(&changed));
    }

    #[test]
    fn small_model_gradcheck() {
        for order in [Order::FactFirst, Order::EmotionFirst] {
            let (model, ctxs) = small_gradcheck_setup(7, order, Toggles::default()).unwrap();
            for g in gradcheck(&model, &ctxs, &TrainConfig::default().weights()).unwrap() {
                assert!(g.relative_error < GRADCHECK_TOLERANCE, "{order:?} {g:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn penalty_is_monotone(seed in 0u64..1000, d1 in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let l = Tensor::from_rows(&rows).unwrap();
            let flags = [false, true, false, true, false];
            let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let lo = ce(&l, &targets, &flags, d1);
            let hi = ce(&l, &targets, &flags, d1 + extra);
            prop_assert!(hi >= lo);
        }
    }
}
