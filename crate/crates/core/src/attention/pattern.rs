//! Fixed sparsity patterns realized as masks over full attention.

use super::{check_qkv, check_valid, masked_attention, AttentionOutput, PatternKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PatternParams {
    /// Half-width of the sliding window.
    pub window: usize,
    pub stride: usize,
    pub global_tokens: usize,
    /// Random keys per query row (BigBird).
    pub random_tokens: usize,
}

/// `N×N` mask of allowed query/key pairs. The diagonal is always allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsityPattern {
    pub n: usize,
    pub allowed: Mask,
}

impl SparsityPattern {
    pub fn density(&self) -> f64 {
        self.allowed.allowed.iter().filter(|&&b| b).count() as f64 / (self.n * self.n) as f64
    }
}

pub fn build_sparsity_pattern(
    kind: PatternKind,
    params: PatternParams,
    n: usize,
    rng: &mut Rng,
) -> Result<SparsityPattern> {
    if n < 1 {
        return Err(Error::Param("pattern length must be at least 1".into()));
    }
    let PatternParams {
        window: w,
        stride: s,
        global_tokens: g,
        random_tokens: rho,
    } = params;
    match kind {
        PatternKind::Local | PatternKind::Longformer | PatternKind::Bigbird if w == 0 => {
            return Err(Error::Param("window must be at least 1".into()))
        }
        PatternKind::Strided | PatternKind::Fixed if s == 0 => {
            return Err(Error::Param("stride must be at least 1".into()))
        }
        _ => {}
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let dist = i.abs_diff(j);
            allowed[i * n + j] = match kind {
                PatternKind::Local => dist <= w,
                PatternKind::Strided => dist < s || dist % s == 0,
                PatternKind::Fixed => i / s == j / s || j % s == s - 1,
                PatternKind::Longformer | PatternKind::Bigbird => dist <= w || i < g || j < g,
            } || i == j;
        }
    }
    if kind == PatternKind::Bigbird && rho > 0 {
        for i in 0..n {
            let mut cols = rng.permutation(n);
            cols.truncate(rho.min(n));
            for j in cols {
                allowed[i * n + j] = true;
            }
        }
    }
    Ok(SparsityPattern {
        n,
        allowed: Mask::new(n, n, allowed)?,
    })
}

/// Full attention restricted to `pattern`; padded keys are masked as well.
pub fn pattern_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    pattern: &SparsityPattern,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, _) = check_qkv(q, k, v)?;
    if pattern.n != n || k.shape()[0] != n {
        return Err(Error::Shape {
            op: "pattern_attention",
            lhs: vec![pattern.n, pattern.n],
            rhs: q.shape().to_vec(),
        });
    }
    check_valid(key_valid, n)?;
    let mask = match key_valid {
        None => pattern.allowed.clone(),
        Some(valid) => {
            let mut m = pattern.allowed.and(&Mask::from_key_valid(n, valid))?;
            // Padded query rows may lose every key; let them see themselves.
            for i in 0..n {
                if !valid[i] && !(0..n).any(|j| m.get(i, j)) {
                    m.allowed[i * n + i] = true;
                }
            }
            m
        }
    };
    masked_attention(q, k, v, Some(&mask))
}
