//! Locality-sensitive-hashing attention with tied queries and keys.
//!
//! Per hash round, tokens are bucketed by the argmax of a random rotation,
//! stably sorted by bucket, cut into chunks of `bucket_size`, and each chunk
//! attends to itself and the chunk before it. Rounds are combined with
//! weights proportional to each round's softmax normalizer.
//!
//! Padded tokens go to a sentinel bucket that sorts last, and the bucket count
//! depends only on the number of real tokens, so appending padding never
//! changes what a real token attends to.

use super::{check_qkv, check_valid, AttentionOutput, NEG_LARGE};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Logit penalty for a token attending to itself.
const SELF_PENALTY: f32 = -1e5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LshOptions {
    pub rounds: usize,
    pub bucket_size: usize,
    pub exclude_self: bool,
}

/// Bucket ids for each round; padded tokens get bucket `n_buckets`.
///
/// Returns `(buckets per round, n_buckets)`.
pub fn lsh_buckets(
    x: &Tensor,
    opts: LshOptions,
    valid: &[bool],
    rng: &mut Rng,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let (n, d) = (x.rows(), x.cols());
    let n_real = valid.iter().filter(|&&b| b).count();
    let mut n_buckets = n_real.div_ceil(opts.bucket_size).max(1);
    if n_buckets > 1 && n_buckets % 2 == 1 {
        n_buckets += 1;
    }
    let mut rounds = Vec::with_capacity(opts.rounds);
    for _ in 0..opts.rounds {
        if n_buckets == 1 {
            rounds.push((0..n).map(|i| if valid[i] { 0 } else { 1 }).collect());
            continue;
        }
        let half = n_buckets / 2;
        let rot = rng.normal_tensor(&[d, half], 1.0);
        let proj = x.matmul(&rot)?;
        let buckets = (0..n)
            .map(|i| {
                if !valid[i] {
                    return n_buckets;
                }
                let row = proj.row(i);
                let mut best = (f32::NEG_INFINITY, 0);
                for (b, &p) in row.iter().enumerate() {
                    if p > best.0 {
                        best = (p, b);
                    }
                    if -p > best.0 {
                        best = (-p, b + half);
                    }
                }
                best.1
            })
            .collect();
        rounds.push(buckets);
    }
    Ok((rounds, n_buckets))
}

pub fn lsh_attention(
    qk: &Var,
    v: &Var,
    opts: LshOptions,
    rng: &mut Rng,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, _) = check_qkv(qk, qk, v)?;
    if opts.rounds < 1 || opts.bucket_size < 1 {
        return Err(Error::Param("hash rounds and bucket size must be at least 1".into()));
    }
    check_valid(key_valid, n)?;
    let all_valid = vec![true; n];
    let valid = key_valid.unwrap_or(&all_valid);
    let (rounds, _) = lsh_buckets(qk.value(), opts, valid, rng)?;
    lsh_attention_with_buckets(qk, v, &rounds, opts, key_valid)
}

/// LSH attention for given per-round bucket ids, as returned by
/// [`lsh_buckets`]. The result is differentiable for a fixed assignment.
pub fn lsh_attention_with_buckets(
    qk: &Var,
    v: &Var,
    rounds: &[Vec<usize>],
    opts: LshOptions,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, d) = check_qkv(qk, qk, v)?;
    if rounds.is_empty() || opts.bucket_size < 1 || rounds.iter().any(|r| r.len() != n) {
        return Err(Error::Param("need at least one round of n bucket ids and a positive bucket size".into()));
    }
    check_valid(key_valid, n)?;
    let all_valid = vec![true; n];
    let valid = key_valid.unwrap_or(&all_valid);

    // unit-norm keys, as in the tied-QK formulation
    let norms = qk.mul(qk)?.sum_rows()?.add_scalar(1e-12).sqrt();
    let keys = qk.div_col(&norms)?;
    let scale = 1.0 / (d as f32).sqrt();
    let b = opts.bucket_size;

    let mut outs = Vec::with_capacity(rounds.len());
    let mut lses = Vec::with_capacity(rounds.len());
    for buckets in rounds {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (buckets[i], i));
        let mut inverse = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let sq = qk.gather_rows(&order)?;
        let sk = keys.gather_rows(&order)?;
        let sv = v.gather_rows(&order)?;
        let mut chunk_out = Vec::new();
        let mut chunk_lse = Vec::new();
        let n_chunks = n.div_ceil(b);
        for c in 0..n_chunks {
            let q_start = c * b;
            let q_len = b.min(n - q_start);
            let k_start = if c > 0 { q_start - b } else { q_start };
            let k_len = q_start + q_len - k_start;
            let qc = if q_len == n { sq.clone() } else { sq.slice_rows(q_start, q_len)? };
            let kc = if k_len == n { sk.clone() } else { sk.slice_rows(k_start, k_len)? };
            let vc = if k_len == n { sv.clone() } else { sv.slice_rows(k_start, k_len)? };
            let mut bias = vec![0.0f32; q_len * k_len];
            for qi in 0..q_len {
                let qpos = order[q_start + qi];
                for kj in 0..k_len {
                    let kpos = order[k_start + kj];
                    let cell = &mut bias[qi * k_len + kj];
                    if !valid[kpos] {
                        *cell = NEG_LARGE;
                    } else if opts.exclude_self && kpos == qpos {
                        *cell = SELF_PENALTY;
                    }
                }
            }
            let mut logits = qc.matmul_nt(&kc, scale)?;
            if bias.iter().any(|&x| x != 0.0) {
                logits = logits.add(&Var::constant(Tensor::new(&[q_len, k_len], bias)?))?;
            }
            chunk_lse.push(logits.logsumexp_rows()?);
            chunk_out.push(logits.softmax_rows(None)?.matmul(&vc)?);
        }
        let sorted_out = if chunk_out.len() == 1 { chunk_out.pop().expect("one chunk") } else { Var::concat_rows(&chunk_out)? };
        let sorted_lse = if chunk_lse.len() == 1 { chunk_lse.pop().expect("one chunk") } else { Var::concat_rows(&chunk_lse)? };
        outs.push(sorted_out.gather_rows(&inverse)?);
        lses.push(sorted_lse.gather_rows(&inverse)?);
    }
    let output = if outs.len() == 1 {
        outs.pop().expect("one round")
    } else {
        let w = Var::concat_cols(&lses)?.softmax_rows(None)?;
        let mut acc: Option<Var> = None;
        for (r, o) in outs.iter().enumerate() {
            let term = o.mul_col(&w.slice_cols(r, 1)?)?;
            acc = Some(match acc {
                Some(a) => a.add(&term)?,
                None => term,
            });
        }
        acc.expect("at least one round")
    };
    Ok(AttentionOutput { output, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::full_attention;

    fn opts(rounds: usize, bucket_size: usize, exclude_self: bool) -> LshOptions {
        LshOptions { rounds, bucket_size, exclude_self }
    }

    #[test]
    fn identical_tokens_share_buckets() {
        let mut rng = Rng::new(1);
        let row = rng.normal_tensor(&[1, 6], 1.0);
        let x = Tensor::new(&[16, 6], row.data().repeat(16)).unwrap();
        let (rounds, nb) = lsh_buckets(&x, opts(4, 4, true), &[true; 16], &mut rng).unwrap();
        assert!(nb > 1);
        for r in rounds {
            assert!(r.iter().all(|&b| b == r[0]));
        }
    }

    #[test]
    fn single_chunk_without_exclusion_is_full_attention() {
        let mut rng = Rng::new(2);
        let qk = Var::constant(rng.normal_tensor(&[10, 4], 1.0));
        let v = Var::constant(rng.normal_tensor(&[10, 4], 1.0));
        let out = lsh_attention(&qk, &v, opts(1, 16, false), &mut rng, None).unwrap();
        let norms = qk.mul(&qk).unwrap().sum_rows().unwrap().add_scalar(1e-12).sqrt();
        let keys = qk.div_col(&norms).unwrap();
        let full = full_attention(&qk, &keys, &v, None).unwrap();
        assert!(out.output.value().max_abs_diff(full.output.value()).unwrap() < 1e-5);
    }

    #[test]
    fn self_is_excluded_unless_alone() {
        let mut rng = Rng::new(3);
        let qk = Var::constant(rng.normal_tensor(&[1, 4], 1.0));
        let v = Var::constant(rng.normal_tensor(&[1, 4], 1.0));
        let out = lsh_attention(&qk, &v, opts(2, 4, true), &mut rng, None).unwrap();
        assert!(out.output.value().max_abs_diff(v.value()).unwrap() < 1e-6);

        // two tokens in one chunk: each attends only to the other
        let qk = Var::constant(rng.normal_tensor(&[2, 4], 1.0));
        let v = Var::constant(Tensor::eye(2));
        let out = lsh_attention(&qk, &v, opts(1, 4, true), &mut rng, None).unwrap();
        assert!(out.output.value().at(0, 0) < 1e-4 && out.output.value().at(1, 1) < 1e-4);
    }

    #[test]
    fn parameters_validated() {
        let x = Var::constant(Tensor::zeros(&[2, 2]));
        assert!(lsh_attention(&x, &x, opts(0, 2, true), &mut Rng::new(0), None).is_err());
        assert!(lsh_attention(&x, &x, opts(1, 0, true), &mut Rng::new(0), None).is_err());
    }
}
