use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::{normal_init, xavier_uniform};
use crate::numerics::{attention, ParamStore, Tape, Var};

pub fn register_qformer(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, n_q: usize) -> Result<()> {
    store.insert("qformer.query", normal_init(rng, &[n_q, d], 0.02))?;
    for block in ["self", "cross"] {
        for m in ["wq", "wk", "wv"] {
            store.insert(format!("qformer.{block}.{m}"), xavier_uniform(rng, d, d))?;
        }
    }
    store.insert("qformer.phi_m", xavier_uniform(rng, d, d))?;
    Ok(())
}

fn projected_attention(tape: &mut Tape, store: &ParamStore, block: &str, q: Var, kv: Var) -> Result<Var> {
    let wq = tape.param_named(store, &format!("qformer.{block}.wq"))?;
    let wk = tape.param_named(store, &format!("qformer.{block}.wk"))?;
    let wv = tape.param_named(store, &format!("qformer.{block}.wv"))?;
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(kv, wk)?;
    let vp = tape.matmul(kv, wv)?;
    attention(tape, qp, kp, vp, None)
}

/// `q̄ = Attn(q) + q`, then `M̄ = (Attn(q̄, [M; V]) + q̄) φ_M`, where the
/// key/value set stacks `M` over `V` along the frame axis.
pub fn qformer_aggregate(tape: &mut Tape, store: &ParamStore, m: Var, v: Var) -> Result<Var> {
    let (ms, vs) = (tape.shape(m).to_vec(), tape.shape(v).to_vec());
    if ms.len() != 2 || vs.len() != 2 || ms[1] != vs[1] {
        return Err(Error::usage(format!("qformer shape mismatch: M {ms:?}, V {vs:?}")));
    }
    let q = tape.param_named(store, "qformer.query")?;
    if tape.shape(q)[1] != ms[1] {
        return Err(Error::usage(format!(
            "qformer queries have width {}, features have {}",
            tape.shape(q)[1],
            ms[1]
        )));
    }
    let self_att = projected_attention(tape, store, "self", q, q)?;
    let q_bar = tape.add(self_att, q)?;
    let kv = tape.concat(&[m, v], 0)?;
    let cross = projected_attention(tape, store, "cross", q_bar, kv)?;
    let joined = tape.add(cross, q_bar)?;
    let phi = tape.param_named(store, "qformer.phi_m")?;
    tape.matmul(joined, phi)
}
