//! Dynamic bias adjustment routing: scalar tanh gates balancing the factual
//! and emotional blocks, softmax routes over retrieval groups, and the
//! aggregated multimodal representation `M`.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::params::xavier_uniform;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Gates with magnitude below this can silence a branch; reported as a warning.
pub const WEAK_GATE: f64 = 1e-3;

pub fn register_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) -> Result<()> {
    for name in ["dbar.u_f", "dbar.r_f", "dbar.u_e", "dbar.r_e"] {
        store.insert(name, xavier_uniform(rng, d, d))?;
    }
    store.insert("dbar.b_f", Tensor::zeros(&[d]))?;
    store.insert("dbar.b_e", Tensor::zeros(&[d]))?;
    store.insert("dbar.w_g", xavier_uniform(rng, d, 1))?;
    Ok(())
}

fn check_groups(tape: &Tape, groups: &[Var], what: &str) -> Result<Vec<usize>> {
    let first = groups.first().ok_or_else(|| Error::usage(format!("no {what} groups")))?;
    let shape = tape.shape(*first).to_vec();
    if shape.len() != 2 || groups.iter().any(|g| tape.shape(*g) != shape.as_slice()) {
        return Err(Error::usage(format!("{what} groups must share one N×d shape")));
    }
    Ok(shape)
}

fn group_mean(tape: &mut Tape, groups: &[Var]) -> Result<Var> {
    let mut acc = groups[0];
    for &g in &groups[1..] {
        acc = tape.add(acc, g)?;
    }
    Ok(tape.scale(acc, 1.0 / groups.len() as f64))
}

/// Scalar gates `(B_f, B_e)`, each `tanh(mean(F̄ U + Ē R + b))` where the
/// mean runs over every frame and feature.
pub fn compute_gates(tape: &mut Tape, store: &ParamStore, factual: &[Var], emotional: &[Var]) -> Result<(Var, Var)> {
    let fs = check_groups(tape, factual, "factual")?;
    let es = check_groups(tape, emotional, "emotional")?;
    if fs != es || factual.len() != emotional.len() {
        return Err(Error::usage("factual and emotional groups differ in shape or count"));
    }
    let f_bar = group_mean(tape, factual)?;
    let e_bar = group_mean(tape, emotional)?;
    let gate = |tape: &mut Tape, u: &str, r: &str, b: &str| -> Result<Var> {
        let (u, r, b) = (
            tape.param_named(store, u)?,
            tape.param_named(store, r)?,
            tape.param_named(store, b)?,
        );
        let fu = tape.matmul(f_bar, u)?;
        let er = tape.matmul(e_bar, r)?;
        let inner = tape.add(fu, er)?;
        let inner = tape.add(inner, b)?;
        let pooled = tape.mean(inner);
        Ok(tape.tanh(pooled))
    };
    let bf = gate(tape, "dbar.u_f", "dbar.r_f", "dbar.b_f")?;
    let be = gate(tape, "dbar.u_e", "dbar.r_e", "dbar.b_e")?;
    for (label, g) in [("factual", bf), ("emotional", be)] {
        let v = tape.value(g).item();
        if v.abs() < WEAK_GATE {
            log::warn!("{label} gate is {v:.2e}; that branch is nearly silenced");
        }
    }
    Ok((bf, be))
}

/// Route weights `G` (`K × 1`): each `H_i` is frame-averaged, mapped by
/// `W_g` to one logit, and the `K` logits are softmax-normalised.
pub fn compute_routes(tape: &mut Tape, store: &ParamStore, hidden: &[Var]) -> Result<Var> {
    check_groups(tape, hidden, "hidden")?;
    let pooled = hidden
        .iter()
        .map(|&h| tape.mean_axis(h, 0))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.concat(&pooled, 0)?; // K×d
    let w_g = tape.param_named(store, "dbar.w_g")?;
    let logits = tape.matmul(stacked, w_g)?; // K×1
    tape.softmax(logits, 0)
}

/// Uniform routes `1/K` as a constant, used when bias adjustment is off.
pub fn uniform_routes(tape: &mut Tape, k: usize) -> Var {
    tape.constant(Tensor::full(&[k, 1], 1.0 / k as f64))
}

/// `M = [B_f Σ g_i F_i ; B_e Σ g_i E_i]`, stacked along the frame axis
/// (`2N × d`). `gates = None` fixes both gates to 1.
pub fn aggregate(
    tape: &mut Tape,
    factual: &[Var],
    emotional: &[Var],
    routes: Var,
    gates: Option<(Var, Var)>,
) -> Result<Var> {
    let fs = check_groups(tape, factual, "factual")?;
    let es = check_groups(tape, emotional, "emotional")?;
    let k = factual.len();
    if fs != es || emotional.len() != k || tape.value(routes).len() != k {
        return Err(Error::usage(format!(
            "aggregate mismatch: {k} factual, {} emotional groups, {} routes",
            emotional.len(),
            tape.value(routes).len()
        )));
    }
    let routes = tape.reshape(routes, &[k, 1])?;
    let weighted = |tape: &mut Tape, groups: &[Var]| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (i, &g) in groups.iter().enumerate() {
            let gi = tape.narrow(routes, 0, i, 1)?;
            let term = tape.mul(g, gi)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one group"))
    };
    let mut f_sum = weighted(tape, factual)?;
    let mut e_sum = weighted(tape, emotional)?;
    if let Some((bf, be)) = gates {
        f_sum = tape.mul(f_sum, bf)?;
        e_sum = tape.mul(e_sum, be)?;
    }
    tape.concat(&[f_sum, e_sum], 0)
}

/// Per-sample gate and route values for reporting.
#[derive(Clone, Debug, Serialize)]
pub struct RoutingDiagnostics {
    pub gate_factual: f64,
    pub gate_emotional: f64,
    pub routes: Vec<f64>,
}
