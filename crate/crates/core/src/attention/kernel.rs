//! Kernelized attention: `φ(q)ᵀ Σⱼ φ(kⱼ) vⱼᵀ / φ(q)ᵀ Σⱼ φ(kⱼ)`.
//!
//! Keys are folded into an `m×d` summary chunk by chunk and queries are read
//! out chunk by chunk, so nothing of size `N×N` (or `N×m`) is ever live.

use super::{check_qkv, check_valid, chunks, valid_column, AttentionOutput, FeatureMap, QUERY_CHUNK};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::{Tensor, EPS};

/// `m×d` Gaussian projection, orthogonalized in blocks of `d` rows and
/// rescaled so each row has the norm of an independent Gaussian vector.
pub fn favor_projection(d: usize, m: usize, rng: &mut Rng) -> Result<Tensor> {
    if m < 1 || d < 1 {
        return Err(Error::Param("feature count and width must be at least 1".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let block = orthonormal_block(d, rng);
        for r in block {
            if rows.len() == m {
                break;
            }
            rows.push(r);
        }
    }
    let mut data = Vec::with_capacity(m * d);
    for r in rows {
        let norm: f64 = (0..d).map(|_| (rng.normal() as f64).powi(2)).sum::<f64>().sqrt();
        data.extend(r.iter().map(|x| (x * norm) as f32));
    }
    Tensor::new(&[m, d], data)
}

/// `d` orthonormal rows from Gram-Schmidt on Gaussian draws.
fn orthonormal_block(d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal() as f64).collect();
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// `Φ(x)_j = exp(w_jᵀx − ‖x‖²/2) / √m` for a given projection `w` (`m×d`).
pub fn positive_features(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let m = w.rows();
    let xv = Var::constant(x.clone());
    let wv = Var::constant(w.clone());
    let half_sq = xv.mul(&xv)?.sum_rows()?.scale(0.5);
    let z = xv.matmul_nt(&wv, 1.0)?.sub_col(&half_sq)?;
    Ok(z.exp().value().scale(1.0 / (m as f32).sqrt()))
}

/// Positive random features of the rows of `x` with a freshly drawn
/// orthogonal projection.
pub fn random_feature_map(x: &Tensor, m: usize, rng: &mut Rng) -> Result<Tensor> {
    let w = favor_projection(x.cols(), m, rng)?;
    positive_features(x, &w)
}

/// Differentiable feature map. For FAVOR+ the input is pre-scaled by
/// `d^{-1/4}` so the features estimate `exp(qᵀk/√d)`; the stabilizing shift
/// is a constant that cancels between numerator and denominator.
fn features(x: &Var, map: FeatureMap, w: Option<&Var>, key_shift: Option<f32>) -> Result<Var> {
    match map {
        FeatureMap::Elu1 => Ok(x.elu1()),
        FeatureMap::FavorPlus => {
            let w = w.ok_or_else(|| Error::Param("FAVOR+ needs a projection".into()))?;
            let d = x.shape()[1];
            let m = w.shape()[0];
            let xs = x.scale((d as f32).powf(-0.25));
            let half_sq = xs.mul(&xs)?.sum_rows()?.scale(0.5);
            let z = xs.matmul_nt(w, 1.0)?.sub_col(&half_sq)?;
            let z = match key_shift {
                Some(s) => z.add_scalar(-s),
                None => {
                    let zv = z.value();
                    let maxes = (0..zv.rows())
                        .map(|i| zv.row(i).iter().copied().fold(f32::NEG_INFINITY, f32::max))
                        .collect();
                    z.sub_col(&Var::constant(Tensor::new(&[zv.rows(), 1], maxes)?))?
                }
            };
            Ok(z.exp().scale(1.0 / (m as f32).sqrt()))
        }
    }
}

/// Largest pre-exponential key feature logit, computed chunk by chunk.
fn key_shift(k: &Var, w: &Var) -> Result<f32> {
    let kc = Var::constant(k.value().clone());
    let wc = Var::constant(w.value().clone());
    let d = kc.shape()[1];
    let n = kc.shape()[0];
    let mut best = f32::NEG_INFINITY;
    for (start, len) in chunks(n, QUERY_CHUNK) {
        let x = kc.slice_rows(start, len)?.scale((d as f32).powf(-0.25));
        let half_sq = x.mul(&x)?.sum_rows()?.scale(0.5);
        let z = x.matmul_nt(&wc, 1.0)?.sub_col(&half_sq)?;
        best = z.value().data().iter().copied().fold(best, f32::max);
    }
    Ok(best)
}

/// Linear-cost attention with feature map `map`. `projection` (`m×d`) is
/// required for FAVOR+ and ignored for `elu + 1`.
pub fn kernel_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    map: FeatureMap,
    projection: Option<&Tensor>,
    key_valid: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (n, d) = check_qkv(q, k, v)?;
    let nk = k.shape()[0];
    check_valid(key_valid, nk)?;
    let w = match (map, projection) {
        (FeatureMap::FavorPlus, Some(p)) => {
            if p.shape().len() != 2 || p.cols() != d {
                return Err(Error::Shape {
                    op: "kernel_attention",
                    lhs: p.shape().to_vec(),
                    rhs: q.shape().to_vec(),
                });
            }
            Some(Var::constant(p.clone()))
        }
        (FeatureMap::FavorPlus, None) => {
            return Err(Error::Param("FAVOR+ needs a projection".into()))
        }
        (FeatureMap::Elu1, _) => None,
    };
    let shift = match &w {
        Some(w) => Some(key_shift(k, w)?),
        None => None,
    };
    let valid_col = key_valid.map(valid_column);
    let mut kv: Option<Var> = None;
    let mut ksum: Option<Var> = None;
    for (start, len) in chunks(nk, QUERY_CHUNK) {
        let (kc, vc) = if len == nk {
            (k.clone(), v.clone())
        } else {
            (k.slice_rows(start, len)?, v.slice_rows(start, len)?)
        };
        let mut phi = features(&kc, map, w.as_ref(), shift)?;
        if let Some(col) = &valid_col {
            let c = if len == nk { col.clone() } else { col.slice_rows(start, len)? };
            phi = phi.mul_col(&c)?;
        }
        let part_kv = phi.matmul_tn(&vc)?;
        let part_sum = phi.sum_cols()?;
        kv = Some(match kv {
            Some(acc) => acc.add(&part_kv)?,
            None => part_kv,
        });
        ksum = Some(match ksum {
            Some(acc) => acc.add(&part_sum)?,
            None => part_sum,
        });
    }
    let kv = kv.ok_or(Error::Empty("kernel_attention keys"))?;
    let ksum = ksum.ok_or(Error::Empty("kernel_attention keys"))?;
    let mut parts = Vec::with_capacity(n.div_ceil(QUERY_CHUNK));
    for (start, len) in chunks(n, QUERY_CHUNK) {
        let qc = if len == n { q.clone() } else { q.slice_rows(start, len)? };
        let phi = features(&qc, map, w.as_ref(), None)?;
        let den = phi.matmul_nt(&ksum, 1.0)?;
        if let Some((row, &value)) = den.value().data().iter().enumerate().find(|(_, &x)| !(x >= EPS)) {
            return Err(Error::Normalization { row: start + row, value });
        }
        parts.push(phi.matmul(&kv)?.div_col(&den)?);
    }
    let output = if parts.len() == 1 {
        parts.pop().expect("one chunk")
    } else {
        Var::concat_rows(&parts)?
    };
    Ok(AttentionOutput { output, weights: None })
}
