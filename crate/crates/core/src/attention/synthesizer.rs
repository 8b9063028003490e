//! Synthesized attention: weights come from the tokens alone (dense) or from
//! a learned global matrix (random), never from query-key dot products.
//!
//! Both variants have a fixed logit width, so inputs longer than that width
//! are rejected.

use super::{check_valid, AttentionOutput};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Mask;

/// Two-layer per-token projection `relu(x W1 + b1) W2 + b2` onto `max_len` logits.
#[derive(Clone, Debug)]
pub struct DenseSynthParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn finish(logits: Var, v: &Var, key_valid: Option<&[bool]>) -> Result<AttentionOutput> {
    let n = logits.shape()[0];
    check_valid(key_valid, n)?;
    let mask = key_valid.map(|kv| Mask::from_key_valid(n, kv));
    let weights = logits.softmax_rows(mask.as_ref())?;
    let output = weights.matmul(v)?;
    Ok(AttentionOutput {
        output,
        weights: Some(weights.value().clone()),
    })
}

fn width_check(n: usize, width: usize) -> Result<()> {
    if n > width {
        return Err(Error::Length { len: n, max: width });
    }
    Ok(())
}

pub fn synthesizer_dense(
    x: &Var,
    v: &Var,
    params: &DenseSynthParams,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let n = x.shape()[0];
    if v.shape()[0] != n {
        return Err(Error::Shape { op: "synthesizer", lhs: x.shape().to_vec(), rhs: v.shape().to_vec() });
    }
    let width = params.w2.shape()[1];
    width_check(n, width)?;
    let h = x.matmul(&params.w1)?.add_row(&params.b1)?.relu();
    let logits = h.matmul(&params.w2)?.add_row(&params.b2)?;
    let logits = if width == n { logits } else { logits.slice_cols(0, n)? };
    finish(logits, v, key_valid)
}

/// `r` is the learned `L×L` logit matrix; its leading `N×N` block is used.
pub fn synthesizer_random(r: &Var, v: &Var, key_valid: Option<&[bool]>) -> Result<AttentionOutput> {
    let n = v.shape()[0];
    let s = r.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape { op: "synthesizer", lhs: s.to_vec(), rhs: v.shape().to_vec() });
    }
    width_check(n, s[0])?;
    let logits = if s[0] == n { r.clone() } else { r.slice_rows(0, n)?.slice_cols(0, n)? };
    finish(logits, v, key_valid)
}
