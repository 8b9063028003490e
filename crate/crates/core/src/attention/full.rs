use super::{check_qkv, check_valid, AttentionOutput};
use crate::error::Result;
use crate::tape::Var;
use crate::tensor::Mask;

/// `softmax(QKᵀ/√d) V` over every allowed key.
pub fn full_attention(q: &Var, k: &Var, v: &Var, key_valid: Option<&[bool]>) -> Result<AttentionOutput> {
    let (n, _) = check_qkv(q, k, v)?;
    check_valid(key_valid, k.shape()[0])?;
    let mask = key_valid.map(|kv| Mask::from_key_valid(n, kv));
    masked_attention(q, k, v, mask.as_ref())
}

/// Full attention with an arbitrary boolean mask over the logits.
pub fn masked_attention(q: &Var, k: &Var, v: &Var, mask: Option<&Mask>) -> Result<AttentionOutput> {
    let (_, d) = check_qkv(q, k, v)?;
    let logits = q.matmul_nt(k, 1.0 / (d as f32).sqrt())?;
    let weights = logits.softmax_rows(mask)?;
    drop(logits);
    let output = weights.matmul(v)?;
    Ok(AttentionOutput {
        output,
        weights: Some(weights.value().clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn c(t: Tensor) -> Var {
        Var::constant(t)
    }

    /// Independent f64 reimplementation.
    fn oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<Vec<f64>> {
        let (n, d) = (q.rows(), q.cols());
        let m = k.rows();
        let dv = v.cols();
        let mut out = vec![vec![0.0; dv]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|t| q.at(i, t) as f64 * k.at(j, t) as f64).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..m {
                let w = (logits[j] - mx).exp() / z;
                for t in 0..dv {
                    out[i][t] += w * v.at(j, t) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut rng = Rng::new(1);
        let v = rng.normal_tensor(&[1, 4], 1.0);
        let out = full_attention(&c(rng.normal_tensor(&[1, 4], 1.0)), &c(rng.normal_tensor(&[1, 4], 1.0)), &c(v.clone()), None).unwrap();
        assert!(out.output.value().max_abs_diff(&v).unwrap() < 1e-7);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = Rng::new(2);
        let v = rng.normal_tensor(&[5, 3], 1.0);
        let out = full_attention(&c(Tensor::zeros(&[5, 4])), &c(rng.normal_tensor(&[5, 4], 1.0)), &c(v.clone()), None).unwrap();
        for j in 0..3 {
            let mean: f32 = (0..5).map(|i| v.at(i, j)).sum::<f32>() / 5.0;
            for i in 0..5 {
                assert!((out.output.value().at(i, j) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = Rng::new(3);
        let (q, k, v) = (rng.normal_tensor(&[8, 4], 1.0), rng.normal_tensor(&[8, 4], 1.0), rng.normal_tensor(&[8, 4], 1.0));
        let out = full_attention(&c(q.clone()), &c(k.clone()), &c(v.clone()), None).unwrap();
        let want = oracle(&q, &k, &v);
        for i in 0..8 {
            for t in 0..4 {
                assert!((out.output.value().at(i, t) as f64 - want[i][t]).abs() < 1e-5);
            }
        }
        let w = out.weights.unwrap();
        for i in 0..8 {
            assert!((w.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn all_padded_is_degenerate() {
        let x = c(Tensor::zeros(&[3, 2]));
        let r = full_attention(&x, &x, &x, Some(&[false, false, false]));
        assert!(matches!(r, Err(Error::DegenerateRow { .. })));
    }

    #[test]
    fn padded_keys_get_zero_weight() {
        let mut rng = Rng::new(4);
        let x = c(rng.normal_tensor(&[4, 2], 1.0));
        let out = full_attention(&x, &x, &x, Some(&[true, true, false, true])).unwrap();
        let w = out.weights.unwrap();
        for i in 0..4 {
            assert_eq!(w.at(i, 2), 0.0);
        }
    }
}
