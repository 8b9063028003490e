use arena::attention::{
    build_sparsity_pattern, favor_projection, full_attention, kernel_attention, lsh_attention, masked_attention,
    pattern_attention, synthesizer_random, FeatureMap, LshOptions, PatternKind, PatternParams,
};
use arena::{Mask, Rng, Tensor, Var};

mod common;
use common::checks::{
    encoder_grad_error, favor_weight_error, mechanism_grad_error, median, reduction_diff, GRAD_CASES, REDUCTIONS,
};
use common::{max_abs_diff, to_mat};

fn c(t: &Tensor) -> Var {
    Var::constant(t.clone())
}

#[test]
fn reductions_match_full_attention() {
    for case in REDUCTIONS {
        let mut rng = Rng::new(77);
        for i in 0..20 {
            let diff = reduction_diff(case, &mut rng);
            assert!(diff < 1e-5, "{case}: instance {i} differs by {diff:e}");
        }
    }
}

#[test]
fn mechanism_gradients_match_finite_differences() {
    for case in GRAD_CASES {
        let err = mechanism_grad_error(case, 3);
        assert!(err < 1e-3, "{case}: relative error {err:e}");
    }
}

#[test]
fn encoder_gradients_match_64_bit_differences() {
    let err = encoder_grad_error(4);
    assert!(err < 1e-3, "relative error {err:e}");
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.gather_rows(perm).unwrap()
}

#[test]
fn permutation_equivariance() {
    let mut rng = Rng::new(5);
    let (n, d) = (24, 6);
    let q = rng.normal_tensor(&[n, d], 1.0);
    let k = rng.normal_tensor(&[n, d], 1.0);
    let v = rng.normal_tensor(&[n, d], 1.0);
    let perm = rng.permutation(n);
    let (pq, pk, pv) = (permute_rows(&q, &perm), permute_rows(&k, &perm), permute_rows(&v, &perm));
    let w = favor_projection(d, 64, &mut rng).unwrap();
    type Run<'a> = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'a>;
    let runs: Vec<(&str, Run)> = vec![
        ("full", Box::new(|q, k, v| full_attention(&c(q), &c(k), &c(v), None).unwrap().output.value().clone())),
        (
            "elu1",
            Box::new(|q, k, v| {
                kernel_attention(&c(q), &c(k), &c(v), FeatureMap::Elu1, None, None).unwrap().output.value().clone()
            }),
        ),
        (
            "favor_plus",
            Box::new(|q, k, v| {
                kernel_attention(&c(q), &c(k), &c(v), FeatureMap::FavorPlus, Some(&w), None)
                    .unwrap()
                    .output
                    .value()
                    .clone()
            }),
        ),
    ];
    for (name, run) in runs {
        let base = run(&q, &k, &v);
        let permuted = run(&pq, &pk, &pv);
        let diff = permute_rows(&base, &perm).max_abs_diff(&permuted).unwrap();
        assert!(diff < 1e-5, "{name}: {diff:e}");
    }
}

#[test]
fn exposed_weights_are_convex_combinations() {
    let mut rng = Rng::new(6);
    let n = 20;
    let q = rng.normal_tensor(&[n, 4], 2.0);
    let k = rng.normal_tensor(&[n, 4], 2.0);
    let v = rng.normal_tensor(&[n, 4], 1.0);
    let pattern = build_sparsity_pattern(
        PatternKind::Bigbird,
        PatternParams { window: 2, stride: 1, global_tokens: 1, random_tokens: 3 },
        n,
        &mut rng,
    )
    .unwrap();
    let mut allowed = vec![true; n * n];
    for i in 0..n {
        allowed[i * n + (i + 3) % n] = false;
    }
    let mask = Mask::new(n, n, allowed).unwrap();
    let valid: Vec<bool> = (0..n).map(|i| i < 15).collect();
    let outs = vec![
        full_attention(&c(&q), &c(&k), &c(&v), Some(&valid)).unwrap(),
        masked_attention(&c(&q), &c(&k), &c(&v), Some(&mask)).unwrap(),
        pattern_attention(&c(&q), &c(&k), &c(&v), &pattern, None).unwrap(),
        synthesizer_random(&c(&rng.normal_tensor(&[n, n], 3.0)), &c(&v), None).unwrap(),
    ];
    for out in outs {
        let w = out.weights.expect("exact mechanisms expose weights");
        for i in 0..n {
            assert!(w.row(i).iter().all(|&x| x >= 0.0));
            assert!((w.row(i).iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
        let recombined = w.matmul(&v).unwrap();
        assert!(recombined.max_abs_diff(out.output.value()).unwrap() < 1e-5);
    }
}

#[test]
fn masked_keys_receive_no_weight() {
    let mut rng = Rng::new(7);
    let n = 12;
    let valid: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
    let t = rng.normal_tensor(&[n, 5], 1.0);
    let out = full_attention(&c(&t), &c(&t), &c(&t), Some(&valid)).unwrap();
    let w = out.weights.unwrap();
    for i in 0..n {
        for j in (0..n).filter(|&j| !valid[j]) {
            assert_eq!(w.at(i, j), 0.0);
        }
    }
}

#[test]
fn elu_kernel_matches_quadratic_form() {
    let mut rng = Rng::new(8);
    let (n, d) = (8, 4);
    let q = rng.normal_tensor(&[n, d], 1.0);
    let k = rng.normal_tensor(&[n, d], 1.0);
    let v = rng.normal_tensor(&[n, d], 1.0);
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let (qm, km, vm) = (to_mat(&q), to_mat(&k), to_mat(&v));
    let expected: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let s: Vec<f64> = (0..n).map(|j| (0..d).map(|t| phi(qm[i][t]) * phi(km[j][t])).sum()).collect();
            let z: f64 = s.iter().sum();
            (0..d).map(|t| (0..n).map(|j| s[j] * vm[j][t]).sum::<f64>() / z).collect()
        })
        .collect();
    let out = kernel_attention(&c(&q), &c(&k), &c(&v), FeatureMap::Elu1, None, None).unwrap();
    assert!(max_abs_diff(&expected, out.output.value()) < 1e-5);
}

#[test]
fn favor_error_shrinks_with_feature_count() {
    let medians: Vec<f64> = [16, 64, 256, 1024]
        .iter()
        .map(|&m| median((0..7).map(|s| favor_weight_error(64, 16, m, 100 + s)).collect()))
        .collect();
    for w in medians.windows(2) {
        assert!(w[1] < w[0], "{medians:?}");
    }
}

#[test]
fn lsh_concentrates_mass_within_clusters() {
    let mut rng = Rng::new(9);
    let (clusters, per, d) = (4, 16, 16);
    let centers: Vec<Vec<f32>> = (0..clusters).map(|_| rng.normal_vec(d, 1.0)).collect();
    let mut rows = Vec::new();
    let mut onehot = Vec::new();
    for (ci, cen) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push(cen.iter().map(|&x| 3.0 * x + 0.1 * rng.normal()).collect::<Vec<_>>());
            onehot.push((0..clusters).map(|j| if j == ci { 1.0 } else { 0.0 }).collect::<Vec<f32>>());
        }
    }
    let qk = Tensor::from_rows(&rows).unwrap();
    let v = Tensor::from_rows(&onehot).unwrap();
    let opts = LshOptions { rounds: 4, bucket_size: per, exclude_self: false };
    let out = lsh_attention(&c(&qk), &c(&v), opts, &mut rng, None).unwrap();
    let own: f64 = (0..clusters * per).map(|i| out.output.value().at(i, i / per) as f64).sum::<f64>() / (clusters * per) as f64;
    assert!(own > 0.9, "mean in-cluster mass {own}");
}
