//! Text checkpoint format.
//!
//! ```text
//! FACE-FORGE-CKPT-1
//! <parameter count>
//! param <name> <rank> <dim_0> ... <dim_{rank-1}>
//! <values separated by single spaces>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip decimal formatting, so a save/load
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "FACE-FORGE-CKPT-1";

pub fn to_string(store: &ParamStore) -> String {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
    writeln!(out, "{}", store.len()).unwrap();
    for p in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "param {} {} {}", p.name, dims.len(), dims.join(" ")).unwrap();
        let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", vals.join(" ")).unwrap();
    }
    out
}

pub fn from_str(text: &str) -> Result<ParamStore> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let parse_err = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
    match lines.next() {
        Some((_, h)) if h == CHECKPOINT_HEADER => {}
        _ => return Err(parse_err(1, "missing FACE-FORGE-CKPT-1 header")),
    }
    let (ln, count) = lines.next().ok_or_else(|| parse_err(2, "missing parameter count"))?;
    let count: usize = count.trim().parse().map_err(|_| parse_err(ln, "bad parameter count"))?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (ln, head) = lines.next().ok_or_else(|| parse_err(0, "truncated checkpoint"))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "param" {
            return Err(parse_err(ln, "expected `param <name> <rank> <dims...>`"));
        }
        let rank: usize = fields[2].parse().map_err(|_| parse_err(ln, "bad rank"))?;
        if fields.len() != 3 + rank {
            return Err(parse_err(ln, "rank does not match dimension count"));
        }
        let shape = fields[3..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| parse_err(ln, "bad dimension")))
            .collect::<Result<Vec<_>>>()?;
        let (vln, body) = lines.next().ok_or_else(|| parse_err(ln + 1, "missing values"))?;
        let data = body
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(vln, "bad value")))
            .collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| parse_err(vln, &e.to_string()))?;
        store.insert(fields[1], value)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_str(&std::fs::read_to_string(path)?)
}

/// Overwrites values in `dst` with same-named, same-shaped entries of `src`.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for p in dst.iter_mut() {
        let s = src
            .by_name(&p.name)
            .ok_or_else(|| Error::data(format!("checkpoint lacks parameter {}", p.name)))?;
        if s.value.shape() != p.value.shape() {
            return Err(Error::data(format!(
                "checkpoint shape {:?} for {} does not match model shape {:?}",
                s.value.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = s.value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
            let mut store = ParamStore::new();
            let n = vals.len();
            store.insert("a.w", Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            store.insert("b", Tensor::new(vec![1, n], vals.iter().map(|v| -v).collect()).unwrap()).unwrap();
            let back = from_str(&to_string(&store)).unwrap();
            for (p, q) in store.iter().zip(back.iter()) {
                prop_assert_eq!(&p.name, &q.name);
                prop_assert_eq!(p.value.shape(), q.value.shape());
                for (x, y) in p.value.data().iter().zip(q.value.data()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn rejects_missing_header() {
        assert!(matches!(from_str("nope\n0\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn rejects_bad_value_line() {
        let text = format!("{CHECKPOINT_HEADER}\n1\nparam x 1 2\n1.0 abc\n");
        assert!(matches!(from_str(&text), Err(Error::Parse { line: 4, .. })));
    }
}
