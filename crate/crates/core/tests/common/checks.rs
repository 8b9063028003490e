//! Mechanism-level checks shared by the integration tests and the acceptance runner.

use arena::attention::{
    build_sparsity_pattern, favor_projection, full_attention, kernel_attention, linformer_attention, lsh_attention,
    lsh_attention_with_buckets, lsh_buckets, masked_attention, pattern_attention, sinkhorn_attention, synthesizer_dense,
    synthesizer_random, DenseSynthParams, FeatureMap, LshOptions, PatternKind, PatternParams,
};
use arena::model::{build_encoder, loss_and_grads, EncoderConfig, Example, ForwardCtx, HeadKind, Input};
use arena::attention::AttentionSpec;
use arena::data::TokenSequence;
use arena::{grad, Mask, Rng, Tensor, Var};

use super::{attention, classify_loss, fd_gradient, matmul, rel_err, to_mat, transpose, Mat, Params64};

pub const REDUCTIONS: [&str; 6] = [
    "masked_all_true",
    "local_window_covers_n",
    "linformer_identity_projections",
    "lsh_single_bucket",
    "sinkhorn_single_block",
    "synthesizer_saturated",
];

fn unit_rows(m: &Mat) -> Mat {
    m.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Max abs difference between a mechanism in its full-attention regime and
/// the 64-bit reference, on one random instance with `n ≤ 128`, `d ≤ 32`.
pub fn reduction_diff(case: &str, rng: &mut Rng) -> f64 {
    let n = rng.range_inclusive(1, 128);
    let d = rng.range_inclusive(1, 32);
    let q = rng.normal_tensor(&[n, d], 1.0);
    let k = rng.normal_tensor(&[n, d], 1.0);
    let v = rng.normal_tensor(&[n, d], 1.0);
    let (qm, km, vm) = (to_mat(&q), to_mat(&k), to_mat(&v));
    let [qv, kv, vv] = [&q, &k, &v].map(|t| Var::constant(t.clone()));
    let exact = attention(&qm, &km, &vm, None);
    let (out, reference) = match case {
        "masked_all_true" => (masked_attention(&qv, &kv, &vv, Some(&Mask::all(n, n))).unwrap(), exact),
        "local_window_covers_n" => {
            let params = PatternParams { window: n + rng.below(4), stride: 1, global_tokens: 0, random_tokens: 0 };
            let p = build_sparsity_pattern(PatternKind::Local, params, n, rng).unwrap();
            (pattern_attention(&qv, &kv, &vv, &p, None).unwrap(), exact)
        }
        "linformer_identity_projections" => {
            let eye = Var::constant(Tensor::eye(n));
            (linformer_attention(&qv, &kv, &vv, &eye, &eye, None).unwrap(), exact)
        }
        "lsh_single_bucket" => {
            let opts = LshOptions { rounds: rng.range_inclusive(1, 3), bucket_size: n + rng.below(8), exclude_self: false };
            let out = lsh_attention(&qv, &vv, opts, rng, None).unwrap();
            (out, attention(&qm, &unit_rows(&qm), &vm, None))
        }
        "sinkhorn_single_block" => {
            let block = n + rng.below(8);
            (sinkhorn_attention(&qv, &kv, &vv, block, 5, None).unwrap(), exact)
        }
        "synthesizer_saturated" => {
            let r = q.matmul(&k.transpose().unwrap()).unwrap().scale(1.0 / (d as f32).sqrt());
            (synthesizer_random(&Var::constant(r), &vv, None).unwrap(), exact)
        }
        other => panic!("unknown reduction {other}"),
    };
    super::max_abs_diff(&reference, out.output.value())
}

pub const GRAD_CASES: [&str; 13] = [
    "full",
    "full_padded",
    "local",
    "bigbird",
    "linformer",
    "kernel_elu",
    "kernel_favor",
    "kernel_elu_padded",
    "lsh",
    "sinkhorn",
    "sinkhorn_padded",
    "synthesizer_dense",
    "synthesizer_random",
];

type Mechanism = Box<dyn Fn(&[Var]) -> Var>;

/// Inputs and forward map for one gradient case at `N = 16`, `d = 8`.
fn grad_case(case: &str, rng: &mut Rng) -> (Vec<Tensor>, Mechanism) {
    const N: usize = 16;
    const D: usize = 8;
    let qkv = |rng: &mut Rng| (0..3).map(|_| rng.normal_tensor(&[N, D], 1.0)).collect::<Vec<_>>();
    let padded: Vec<bool> = (0..N).map(|i| i < N - 5).collect();
    match case {
        "full" => (qkv(rng), Box::new(|x| full_attention(&x[0], &x[1], &x[2], None).unwrap().output)),
        "full_padded" => (qkv(rng), Box::new(move |x| full_attention(&x[0], &x[1], &x[2], Some(&padded)).unwrap().output)),
        "local" | "bigbird" => {
            let kind = if case == "local" { PatternKind::Local } else { PatternKind::Bigbird };
            let params = PatternParams { window: 2, stride: 1, global_tokens: 1, random_tokens: 2 };
            let p = build_sparsity_pattern(kind, params, N, rng).unwrap();
            (qkv(rng), Box::new(move |x| pattern_attention(&x[0], &x[1], &x[2], &p, None).unwrap().output))
        }
        "linformer" => {
            let mut t = qkv(rng);
            t.push(rng.normal_tensor(&[5, N], 0.25));
            t.push(rng.normal_tensor(&[5, N], 0.25));
            (t, Box::new(|x| linformer_attention(&x[0], &x[1], &x[2], &x[3], &x[4], None).unwrap().output))
        }
        "kernel_elu" => {
            (qkv(rng), Box::new(|x| kernel_attention(&x[0], &x[1], &x[2], FeatureMap::Elu1, None, None).unwrap().output))
        }
        "kernel_elu_padded" => (
            qkv(rng),
            Box::new(move |x| kernel_attention(&x[0], &x[1], &x[2], FeatureMap::Elu1, None, Some(&padded)).unwrap().output),
        ),
        "kernel_favor" => {
            let w = favor_projection(D, 32, rng).unwrap();
            let t = (0..3).map(|_| rng.normal_tensor(&[N, D], 0.5)).collect();
            (
                t,
                Box::new(move |x| {
                    kernel_attention(&x[0], &x[1], &x[2], FeatureMap::FavorPlus, Some(&w), None).unwrap().output
                }),
            )
        }
        "lsh" => {
            let qk = rng.normal_tensor(&[N, D], 1.0);
            let v = rng.normal_tensor(&[N, D], 1.0);
            let opts = LshOptions { rounds: 2, bucket_size: 4, exclude_self: true };
            let (rounds, _) = lsh_buckets(&qk, opts, &[true; N], rng).unwrap();
            (vec![qk, v], Box::new(move |x| lsh_attention_with_buckets(&x[0], &x[1], &rounds, opts, None).unwrap().output))
        }
        "sinkhorn" => (qkv(rng), Box::new(|x| sinkhorn_attention(&x[0], &x[1], &x[2], 4, 6, None).unwrap().output)),
        "sinkhorn_padded" => (
            qkv(rng),
            Box::new(move |x| sinkhorn_attention(&x[0], &x[1], &x[2], 4, 6, Some(&padded)).unwrap().output),
        ),
        "synthesizer_dense" => {
            let hidden = 12;
            // keep hidden pre-activations well clear of the ReLU kink, where differences are undefined
            let b1 = rng.normal_tensor(&[hidden], 0.1).map(|b| b + 2.0);
            let t = vec![
                rng.normal_tensor(&[N, D], 1.0),
                rng.normal_tensor(&[N, D], 1.0),
                rng.normal_tensor(&[D, hidden], 0.15),
                b1,
                rng.normal_tensor(&[hidden, N], 0.12),
                rng.normal_tensor(&[N], 0.1),
            ];
            (
                t,
                Box::new(|x| {
                    let p = DenseSynthParams { w1: x[2].clone(), b1: x[3].clone(), w2: x[4].clone(), b2: x[5].clone() };
                    synthesizer_dense(&x[0], &x[1], &p, None).unwrap().output
                }),
            )
        }
        "synthesizer_random" => {
            let t = vec![rng.normal_tensor(&[N, N], 1.0), rng.normal_tensor(&[N, D], 1.0)];
            (t, Box::new(|x| synthesizer_random(&x[0], &x[1], None).unwrap().output))
        }
        other => panic!("unknown gradient case {other}"),
    }
}

fn weighted_sum(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

pub const FD_STEP: f32 = 4e-2;

/// Central differences of `f` at `h`, `h/2`, `h/4`, combined by two rounds of
/// Richardson extrapolation (truncation error `O(h⁶)`).
pub fn extrapolated_difference(f: impl Fn(f32) -> f64, h: f32) -> f64 {
    let d = |s: f32| (f(s) - f(-s)) / (2.0 * s as f64);
    let (d1, d2, d4) = (d(h), d(h / 2.0), d(h / 4.0));
    let r1 = (4.0 * d2 - d1) / 3.0;
    let r2 = (4.0 * d4 - d2) / 3.0;
    (16.0 * r2 - r1) / 15.0
}

/// Largest per-input relative error between tape gradients of
/// `Σ out ⊙ R` and extrapolated f32 central differences.
pub fn mechanism_grad_error(case: &str, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (inputs, f) = grad_case(case, &mut rng);
    let params: Vec<Var> = inputs.iter().map(|t| Var::param(t.clone())).collect();
    let out = f(&params);
    let r = rng.normal_tensor(out.shape(), 1.0);
    let loss = out.mul(&Var::constant(r.clone())).unwrap().sum();
    let refs: Vec<&Var> = params.iter().collect();
    let grads = grad(&loss, &refs).unwrap();

    let eval = |idx: usize, coord: usize, delta: f32| -> f64 {
        let xs: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i != idx {
                    return Var::constant(t.clone());
                }
                let mut data = t.to_vec();
                data[coord] += delta;
                Var::constant(Tensor::new(t.shape(), data).unwrap())
            })
            .collect();
        weighted_sum(f(&xs).value(), &r)
    };
    let mut worst = 0.0f64;
    for (idx, t) in inputs.iter().enumerate() {
        let fd: Vec<f64> = (0..t.numel()).map(|c| extrapolated_difference(|s| eval(idx, c, s), FD_STEP)).collect();
        let tape: Vec<f64> = grads[idx].data().iter().map(|&x| x as f64).collect();
        worst = worst.max(rel_err(&tape, &fd));
    }
    worst
}

/// Relative error whose denominator never drops below `1e-4`, so gradients
/// that vanish identically (key biases under softmax) compare on absolute terms.
fn floored_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-4)
}

/// 2-layer full-attention classifier at `N = 16`, `d = 8`: largest relative
/// error over all parameter tensors against 64-bit central differences.
pub fn encoder_grad_error(seed: u64) -> f64 {
    let cfg = EncoderConfig {
        layers: 2,
        heads: 2,
        model_dim: 8,
        ffn_dim: 16,
        max_len: 17,
        vocab_size: 12,
        attention: AttentionSpec::full(),
        head_kind: HeadKind::Classify,
        num_classes: 3,
        mlp_dim: None,
    };
    let m = build_encoder(&cfg, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed ^ 0xabc);
    let ex: Vec<Example> = (0..2)
        .map(|i| {
            let ids = (0..16).map(|_| rng.below(cfg.vocab_size) as u32).collect();
            Example::single(TokenSequence::unpadded(ids), i)
        })
        .collect();
    let refs: Vec<&Example> = ex.iter().collect();
    let (_, grads) = loss_and_grads(&m, &refs, &mut ForwardCtx::new(0)).unwrap();
    let plain: Vec<(Vec<usize>, usize)> = ex
        .iter()
        .map(|e| match &e.input {
            Input::Single(s) => (s.ids.iter().map(|&t| t as usize).collect(), e.label),
            Input::Pair(..) => unreachable!(),
        })
        .collect();
    let mut p64 = Params64::from(&m);
    let f = |p: &Params64| classify_loss(p, cfg.layers, cfg.heads, cfg.vocab_size, &plain);
    let names: Vec<String> = p64.values.keys().cloned().collect();
    let mut worst = 0.0f64;
    for name in names {
        let fd = fd_gradient(&mut p64, &name, 1e-5, f);
        let tape: Vec<f64> = grads[&name].data().iter().map(|&x| x as f64).collect();
        worst = worst.max(floored_rel_err(&tape, &fd));
    }
    worst
}

/// Exact softmax attention weights in 64-bit.
pub fn softmax_weights(q: &Mat, k: &Mat) -> Mat {
    let d = q[0].len() as f64;
    matmul(q, &transpose(k))
        .iter()
        .map(|r| super::softmax_row(&r.iter().map(|x| x / d.sqrt()).collect::<Vec<_>>(), None))
        .collect()
}

/// Mean abs error of the FAVOR+ attention matrix (recovered by attending
/// over `V = I`) against exact softmax weights, unit-norm `Q`, `K` rows.
pub fn favor_weight_error(n: usize, d: usize, m: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let unit = |t: Tensor| {
        let rows: Vec<Vec<f32>> = (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                let norm = r.iter().map(|x| x * x).sum::<f32>().sqrt();
                r.iter().map(|x| x / norm).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let q = unit(rng.normal_tensor(&[n, d], 1.0));
    let k = unit(rng.normal_tensor(&[n, d], 1.0));
    let w = favor_projection(d, m, &mut rng).unwrap();
    let [qv, kv] = [&q, &k].map(|t| Var::constant(t.clone()));
    let eye = Var::constant(Tensor::eye(n));
    let approx = kernel_attention(&qv, &kv, &eye, FeatureMap::FavorPlus, Some(&w), None).unwrap();
    let exact = softmax_weights(&to_mat(&q), &to_mat(&k));
    let a = approx.output.value();
    let mut sum = 0.0;
    for (i, row) in exact.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            sum += (a.at(i, j) as f64 - x).abs();
        }
    }
    sum / (n * n) as f64
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// `(1/N) Σᵢ Σⱼ w[i,j]·|i−j|` by a plain double loop.
pub fn span_oracle(w: &Mat) -> f64 {
    let n = w.len();
    let mut total = 0.0;
    for (i, row) in w.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            total += x * (i as f64 - j as f64).abs();
        }
    }
    total / n as f64
}

/// Random row-stochastic matrix with a mix of peaked and diffuse rows.
pub fn random_stochastic(n: usize, rng: &mut Rng) -> Mat {
    (0..n)
        .map(|_| {
            let temp = 0.2 + 4.0 * rng.uniform();
            let e: Vec<f64> = (0..n).map(|_| (rng.normal() as f64 * temp).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}
