use super::{check_qkv, check_valid, chunks, valid_column, AttentionOutput, QUERY_CHUNK};
use crate::error::{Error, Result};
use crate::tape::Var;

/// Low-rank attention: keys and values are compressed along the sequence by
/// `k×N` projections `e` and `f` before a softmax over the `k` summaries.
///
/// Queries are processed in chunks, so no intermediate grows with `N·k`.
pub fn linformer_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    e: &Var,
    f: &Var,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, d) = check_qkv(q, k, v)?;
    let m = k.shape()[0];
    check_valid(key_valid, m)?;
    for p in [e, f] {
        let s = p.shape();
        if s.len() != 2 || s[1] != m {
            return Err(Error::Shape {
                op: "linformer_attention",
                lhs: s.to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if s[0] < 1 {
            return Err(Error::Param("rank must be at least 1".into()));
        }
    }
    let (k, v) = match key_valid {
        Some(valid) => {
            let col = valid_column(valid);
            (k.mul_col(&col)?, v.mul_col(&col)?)
        }
        None => (k.clone(), v.clone()),
    };
    let ek = e.matmul(&k)?;
    let fv = if e.id() == f.id() && k.id() == v.id() {
        ek.clone()
    } else {
        f.matmul(&v)?
    };
    let scale = 1.0 / (d as f32).sqrt();
    let mut parts = Vec::with_capacity(n.div_ceil(QUERY_CHUNK));
    for (start, len) in chunks(n, QUERY_CHUNK) {
        let qc = if len == n { q.clone() } else { q.slice_rows(start, len)? };
        let w = qc.matmul_nt(&ek, scale)?.softmax_rows(None)?;
        parts.push(w.matmul(&fv)?);
    }
    let output = if parts.len() == 1 {
        parts.pop().expect("one chunk")
    } else {
        Var::concat_rows(&parts)?
    };
    Ok(AttentionOutput { output, weights: None })
}
