//! Sparse Sinkhorn attention.
//!
//! The sequence is cut into non-overlapping blocks. Block summaries (means
//! over real tokens) are compared, the resulting block-score matrix is
//! balanced with log-space Sinkhorn iterations into a near doubly-stochastic
//! mixing matrix `M`, and query block `i` attends to its own block plus the
//! mixed block `Σⱼ M[i,j]·block j`. Blocks made only of padding take no part
//! in the mixing and produce zero outputs.

use super::{check_qkv, check_valid, valid_column, AttentionOutput};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{Mask, Tensor};

/// `exp` of `iters` alternating row and column log-normalizations.
pub fn sinkhorn_normalize(log_scores: &Var, iters: usize) -> Result<Var> {
    if iters == 0 {
        return Err(Error::Param("sinkhorn iterations must be at least 1".into()));
    }
    let mut s = log_scores.clone();
    for _ in 0..iters {
        s = s.sub_col(&s.logsumexp_rows()?)?;
        let t = s.transpose()?;
        s = t.sub_col(&t.logsumexp_rows()?)?.transpose()?;
    }
    Ok(s.exp())
}

fn real_blocks(valid: &[bool], block: usize) -> Vec<usize> {
    (0..valid.len().div_ceil(block))
        .filter(|&bi| valid[bi * block..((bi + 1) * block).min(valid.len())].iter().any(|&x| x))
        .collect()
}

/// Zero-pads rows to a multiple of `block` and masks padded keys to zero.
fn padded(x: &Var, valid: &[bool], block: usize) -> Result<Var> {
    let n = x.shape()[0];
    let x = if valid.iter().all(|&b| b) { x.clone() } else { x.mul_col(&valid_column(valid))? };
    let total = n.div_ceil(block) * block;
    if total == n {
        return Ok(x);
    }
    let pad = Var::constant(Tensor::zeros(&[total - n, x.shape()[1]]));
    Var::concat_rows(&[x, pad])
}

/// Block attention given an explicit `R×R` mixing matrix over the real blocks.
pub fn block_mix_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    mixing: &Var,
    block_size: usize,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, d) = check_qkv(q, k, v)?;
    if k.shape()[0] != n {
        return Err(Error::Shape { op: "sinkhorn_attention", lhs: q.shape().to_vec(), rhs: k.shape().to_vec() });
    }
    if block_size < 1 {
        return Err(Error::Param("block size must be at least 1".into()));
    }
    check_valid(key_valid, n)?;
    let all_valid = vec![true; n];
    let valid = key_valid.unwrap_or(&all_valid);
    let b = block_size;
    let blocks = real_blocks(valid, b);
    let r = blocks.len();
    if mixing.shape() != [r, r] {
        return Err(Error::Shape { op: "block_mix_attention", lhs: mixing.shape().to_vec(), rhs: vec![r, r] });
    }
    let dv = v.shape()[1];
    let n_blocks = n.div_ceil(b);
    let qp = padded(q, &all_valid, b)?;
    let kp = padded(k, valid, b)?;
    let vp = padded(v, valid, b)?;
    let mut padded_valid = valid.to_vec();
    padded_valid.resize(n_blocks * b, false);
    // a mixed row is a real key if any real block has a real token at that offset
    let offset_valid: Vec<bool> = (0..b).map(|t| blocks.iter().any(|&bi| padded_valid[bi * b + t])).collect();

    // gather the real blocks, flattened one block per row
    let flat = |x: &Var, w: usize| -> Result<Var> {
        let rows: Vec<usize> = blocks.iter().flat_map(|&bi| bi * b..(bi + 1) * b).collect();
        x.gather_rows(&rows)?.reshape(&[r, b * w])
    };
    let mixed_k = mixing.matmul(&flat(&kp, d)?)?.reshape(&[r * b, d])?;
    let mixed_v = mixing.matmul(&flat(&vp, dv)?)?.reshape(&[r * b, dv])?;

    let scale = 1.0 / (d as f32).sqrt();
    let mut outs = Vec::with_capacity(n_blocks);
    let mut ri = 0;
    for bi in 0..n_blocks {
        if blocks.get(ri) != Some(&bi) {
            outs.push(Var::constant(Tensor::zeros(&[b, dv])));
            continue;
        }
        let qb = qp.slice_rows(bi * b, b)?;
        let keys = Var::concat_rows(&[kp.slice_rows(bi * b, b)?, mixed_k.slice_rows(ri * b, b)?])?;
        let vals = Var::concat_rows(&[vp.slice_rows(bi * b, b)?, mixed_v.slice_rows(ri * b, b)?])?;
        let mut allowed = Vec::with_capacity(b * 2 * b);
        for _ in 0..b {
            allowed.extend_from_slice(&padded_valid[bi * b..(bi + 1) * b]);
            allowed.extend_from_slice(&offset_valid);
        }
        let mask = Mask::new(b, 2 * b, allowed)?;
        let w = qb.matmul_nt(&keys, scale)?.softmax_rows(Some(&mask))?;
        outs.push(w.matmul(&vals)?);
        ri += 1;
    }
    let out = if outs.len() == 1 { outs.pop().expect("one block") } else { Var::concat_rows(&outs)? };
    let output = if out.shape()[0] == n { out } else { out.slice_rows(0, n)? };
    Ok(AttentionOutput { output, weights: None })
}

/// Sinkhorn-balanced block attention with `iters` normalization rounds.
pub fn sinkhorn_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    block_size: usize,
    iters: usize,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, d) = check_qkv(q, k, v)?;
    if iters == 0 {
        return Err(Error::Param("sinkhorn iterations must be at least 1".into()));
    }
    if block_size < 1 {
        return Err(Error::Param("block size must be at least 1".into()));
    }
    check_valid(key_valid, n)?;
    let all_valid = vec![true; n];
    let valid = key_valid.unwrap_or(&all_valid);
    let blocks = real_blocks(valid, block_size);
    if blocks.is_empty() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    // averaging operator over the real tokens of each real block
    let mut avg = vec![0.0f32; blocks.len() * n];
    for (ri, &bi) in blocks.iter().enumerate() {
        let idx: Vec<usize> = (bi * block_size..((bi + 1) * block_size).min(n)).filter(|&t| valid[t]).collect();
        let w = 1.0 / idx.len() as f32;
        for t in idx {
            avg[ri * n + t] = w;
        }
    }
    let avg = Var::constant(Tensor::new(&[blocks.len(), n], avg)?);
    let sq = avg.matmul(q)?;
    let sk = avg.matmul(k)?;
    let scores = sq.matmul_nt(&sk, 1.0 / (d as f32).sqrt())?;
    let mixing = sinkhorn_normalize(&scores, iters)?;
    block_mix_attention(q, k, v, &mixing, block_size, key_valid)
}
