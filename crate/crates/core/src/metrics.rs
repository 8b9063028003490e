//! Required attention span, accuracy and approximation error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_logits, Example, ForwardCtx, Input, ModelParams};
use crate::rng::mix;
use crate::tensor::Tensor;

/// Row-sum tolerance for treating a matrix as row-stochastic.
pub const STOCHASTIC_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanOptions {
    /// Leave out the CLS query row and renormalize each remaining row over
    /// non-CLS keys (a row with no such mass contributes zero).
    pub exclude_cls: bool,
    /// Divide distances by `N - 1`, putting spans in `[0, 1]`.
    pub normalized: bool,
}

fn check_stochastic(w: &Tensor) -> Result<(usize, usize)> {
    let (n, m) = match w.shape() {
        [n, m] if n == m => (*n, *m),
        s => return Err(Error::Contract(format!("attention weights must be square, got {s:?}"))),
    };
    for i in 0..n {
        let row = w.row(i);
        if row.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Contract(format!("row {i} has a negative or NaN weight")));
        }
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Contract(format!("row {i} sums to {s}")));
        }
    }
    Ok((n, m))
}

/// `(1/N) Σᵢ Σⱼ w[i,j]·|i−j|` for a row-stochastic `N×N` matrix.
pub fn attention_span(weights: &Tensor) -> Result<f64> {
    attention_span_with(weights, SpanOptions::default())
}

pub fn attention_span_with(weights: &Tensor, opts: SpanOptions) -> Result<f64> {
    let (n, _) = check_stochastic(weights)?;
    let first = usize::from(opts.exclude_cls);
    if n <= first {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for i in first..n {
        let row = weights.row(i);
        let mut acc = 0.0f64;
        let mut mass = 0.0f64;
        for (j, &w) in row.iter().enumerate().skip(first) {
            acc += w as f64 * i.abs_diff(j) as f64;
            mass += w as f64;
        }
        if opts.exclude_cls {
            acc = if mass > 0.0 { acc / mass } else { 0.0 };
        }
        total += acc;
    }
    let mut span = total / (n - first) as f64;
    if opts.normalized && n > 1 {
        span /= (n - 1) as f64;
    }
    Ok(span)
}

/// Span of uniform attention over `n` positions, `(n² − 1) / (3n)`.
pub fn uniform_span(n: usize) -> f64 {
    let n = n as f64;
    (n * n - 1.0) / (3.0 * n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    /// `[layer][head]` mean span over samples.
    pub per_head: Vec<Vec<f64>>,
    /// Unweighted mean of `per_head`.
    pub aggregate: f64,
    pub samples: usize,
    pub exclude_cls: bool,
    pub normalized: bool,
}

/// Span averaged over every attention module and the first `samples`
/// examples (both documents of a pair count as attention modules applied).
pub fn required_span(params: &ModelParams, data: &[Example], samples: usize, seed: u64, opts: SpanOptions) -> Result<SpanReport> {
    let cfg = &params.config;
    if !cfg.attention.exposes_weights() {
        return Err(Error::Unsupported(format!(
            "{} does not materialize attention weights; required span is defined on exact weights only",
            cfg.attention.name()
        )));
    }
    let take = samples.min(data.len());
    if take == 0 {
        return Err(Error::Empty("span samples"));
    }
    let bound = params.bind(false);
    let mut ctx = ForwardCtx::collecting(mix(seed, 0x5fa1));
    let mut sums = vec![vec![0.0f64; cfg.heads]; cfg.layers];
    let mut counts = vec![vec![0usize; cfg.heads]; cfg.layers];
    for ex in &data[..take] {
        let lens: Vec<usize> = match &ex.input {
            Input::Single(s) => vec![s.true_len + 1],
            Input::Pair(a, b) => vec![a.true_len + 1, b.true_len + 1],
        };
        batch_logits(&bound, &[ex], &mut ctx)?;
        for (idx, heads) in ctx.weights.iter().enumerate() {
            let (l, real) = (idx % cfg.layers, lens[idx / cfg.layers]);
            for (h, w) in heads.iter().enumerate() {
                let w = if w.rows() == real { w.clone() } else { w.slice_rows(0, real)?.slice_cols(0, real)? };
                sums[l][h] += attention_span_with(&w, opts)?;
                counts[l][h] += 1;
            }
        }
    }
    let per_head: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().zip(c).map(|(s, &c)| s / c.max(1) as f64).collect())
        .collect();
    let flat: Vec<f64> = per_head.iter().flatten().copied().collect();
    let aggregate = flat.iter().sum::<f64>() / flat.len() as f64;
    Ok(SpanReport {
        per_head,
        aggregate,
        samples: take,
        exclude_cls: opts.exclude_cls,
        normalized: opts.normalized,
    })
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (r, c) = match logits.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::Shape { op: "accuracy", lhs: s.to_vec(), rhs: vec![labels.len()] }),
    };
    if r == 0 || labels.is_empty() {
        return Err(Error::Empty("accuracy batch"));
    }
    if labels.len() != r {
        return Err(Error::Shape { op: "accuracy", lhs: vec![r, c], rhs: vec![labels.len()] });
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| argmax(logits.row(i)) == l).count();
    Ok(hits as f64 / r as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxError {
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn approx_error(approx: &Tensor, exact: &Tensor) -> Result<ApproxError> {
    if approx.shape() != exact.shape() {
        return Err(Error::Shape { op: "approx_error", lhs: approx.shape().to_vec(), rhs: exact.shape().to_vec() });
    }
    let mut max_abs = 0.0f64;
    let mut sum = 0.0f64;
    for (a, b) in approx.data().iter().zip(exact.data()) {
        let d = (*a as f64 - *b as f64).abs();
        max_abs = max_abs.max(d);
        sum += d;
    }
    Ok(ApproxError { max_abs, mean_abs: sum / approx.numel() as f64 })
}
