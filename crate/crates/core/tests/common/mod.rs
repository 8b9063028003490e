//! Independent 64-bit reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod tasks;

use std::collections::BTreeMap;

use arena::model::ModelParams;
use arena::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&x| x as f64).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax_row(row: &[f64], allowed: Option<&[bool]>) -> Vec<f64> {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let m = (0..row.len()).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..row.len()).map(|j| if ok(j) { (row[j] - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// `softmax(Q Kᵀ/√d [mask]) V` in 64-bit.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, mask: Option<&[Vec<bool>]>) -> Mat {
    let d = q[0].len() as f64;
    let s = matmul(q, &transpose(k));
    let w: Mat = s
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let scaled: Vec<f64> = r.iter().map(|x| x / d.sqrt()).collect();
            softmax_row(&scaled, mask.map(|m| m[i].as_slice()))
        })
        .collect();
    matmul(&w, v)
}

pub fn max_abs_diff(a: &Mat, b: &Tensor) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            m = m.max((x - b.at(i, j) as f64).abs());
        }
    }
    m
}

/// Encoder parameters widened to 64-bit.
pub struct Params64 {
    pub shapes: BTreeMap<String, Vec<usize>>,
    pub values: BTreeMap<String, Vec<f64>>,
}

impl Params64 {
    pub fn from(m: &ModelParams) -> Self {
        Params64 {
            shapes: m.tensors.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect(),
            values: m.tensors.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|&x| x as f64).collect())).collect(),
        }
    }

    fn mat(&self, name: &str) -> Mat {
        let s = &self.shapes[name];
        let v = &self.values[name];
        v.chunks(s[1]).map(|c| c.to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.values[name].clone()
    }
}

const LN_EPS: f64 = 1e-6;

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) * is * g[j] + b[j]).collect()
        })
        .collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w).into_iter().map(|r| r.iter().zip(b).map(|(a, c)| a + c).collect()).collect()
}

fn relu(x: Mat) -> Mat {
    x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Class logits of a full-attention classifier on an unpadded sequence.
pub fn classify_logits(p: &Params64, layers: usize, heads: usize, vocab: usize, tokens: &[usize]) -> Vec<f64> {
    let tok = p.mat("embed.tokens");
    let pos = p.mat("embed.positions");
    let ids: Vec<usize> = std::iter::once(vocab).chain(tokens.iter().copied()).collect();
    let mut x: Mat = ids.iter().enumerate().map(|(i, &t)| tok[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let d = x[0].len();
    let dh = d / heads;
    for l in 0..layers {
        let n = |s: &str| format!("layer{l}.{s}");
        let h = layer_norm(&x, &p.vec(&n("ln1.gamma")), &p.vec(&n("ln1.beta")));
        let q = affine(&h, &p.mat(&n("attn.wq")), &p.vec(&n("attn.bq")));
        let k = affine(&h, &p.mat(&n("attn.wk")), &p.vec(&n("attn.bk")));
        let v = affine(&h, &p.mat(&n("attn.wv")), &p.vec(&n("attn.bv")));
        let cut = |m: &Mat, hd: usize| -> Mat { m.iter().map(|r| r[hd * dh..(hd + 1) * dh].to_vec()).collect() };
        let mut merged = vec![Vec::with_capacity(d); x.len()];
        for hd in 0..heads {
            let o = attention(&cut(&q, hd), &cut(&k, hd), &cut(&v, hd), None);
            for (m, r) in merged.iter_mut().zip(o) {
                m.extend(r);
            }
        }
        x = add(&x, &affine(&merged, &p.mat(&n("attn.wo")), &p.vec(&n("attn.bo"))));
        let h = layer_norm(&x, &p.vec(&n("ln2.gamma")), &p.vec(&n("ln2.beta")));
        let f = relu(affine(&h, &p.mat(&n("ffn.w1")), &p.vec(&n("ffn.b1"))));
        x = add(&x, &affine(&f, &p.mat(&n("ffn.w2")), &p.vec(&n("ffn.b2"))));
    }
    let cls = layer_norm(&vec![x[0].clone()], &p.vec("final_ln.gamma"), &p.vec("final_ln.beta"));
    let hid = relu(affine(&cls, &p.mat("head.w1"), &p.vec("head.b1")));
    affine(&hid, &p.mat("head.w2"), &p.vec("head.b2")).remove(0)
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Mean cross-entropy over `(tokens, label)` pairs.
pub fn classify_loss(p: &Params64, layers: usize, heads: usize, vocab: usize, data: &[(Vec<usize>, usize)]) -> f64 {
    data.iter()
        .map(|(t, l)| cross_entropy(&classify_logits(p, layers, heads, vocab, t), *l))
        .sum::<f64>()
        / data.len() as f64
}

/// Central differences of `f` with respect to every entry of `name`.
pub fn fd_gradient(p: &mut Params64, name: &str, h: f64, f: impl Fn(&Params64) -> f64) -> Vec<f64> {
    let n = p.values[name].len();
    let mut g = Vec::with_capacity(n);
    for i in 0..n {
        let orig = p.values[name][i];
        p.values.get_mut(name).unwrap()[i] = orig + h;
        let fp = f(p);
        p.values.get_mut(name).unwrap()[i] = orig - h;
        let fm = f(p);
        p.values.get_mut(name).unwrap()[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        0.0
    } else {
        diff / na.max(nb)
    }
}
