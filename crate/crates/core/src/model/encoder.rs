//! Encoder parameters and the forward pass.
//!
//! Blocks are pre-norm residual: `x + Attn(LN(x))` then `x + FFN(LN(x))`.
//! A learned CLS embedding (row `vocab_size` of the token table) is prepended
//! to every input, positions are learned absolute embeddings, and the final
//! CLS state goes through a last layer norm into a two-layer ReLU MLP.

use std::collections::BTreeMap;

use super::config::{EncoderConfig, HeadKind};
use crate::attention::{
    build_sparsity_pattern, favor_projection, full_attention, kernel_attention, linformer_attention,
    lsh_attention, pattern_attention, sinkhorn_attention, synthesizer_dense, synthesizer_random,
    AttentionKind, AttentionOutput, DenseSynthParams, FeatureMap, LshOptions, SparsityPattern, SynthKind,
};
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tape::Var;
use crate::tensor::{Mask, Tensor};

/// Named parameter tensors; names are stable and shapes follow from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parameters lifted onto the tape, either trainable or constant.
pub struct BoundParams<'a> {
    pub config: &'a EncoderConfig,
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams<'_> {
    fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    fn layer(&self, l: usize, name: &str) -> Result<&Var> {
        self.get(&format!("layer{l}.{name}"))
    }

    /// Trainable vars in name order.
    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.as_str(), v))
            .collect()
    }
}

/// Shapes of every parameter, in name order.
pub fn param_shapes(config: &EncoderConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    config.validate()?;
    let d = config.model_dim;
    let f = config.ffn_dim;
    let l_max = config.max_len;
    let a = &config.attention;
    let mut s = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>| {
        s.insert(name, shape);
    };
    put("embed.tokens".into(), vec![config.vocab_size + 1, d]);
    put("embed.positions".into(), vec![l_max, d]);
    for l in 0..config.layers {
        let p = |n: &str| format!("layer{l}.{n}");
        for ln in ["ln1", "ln2"] {
            put(p(&format!("{ln}.gamma")), vec![d]);
            put(p(&format!("{ln}.beta")), vec![d]);
        }
        let (use_q, use_k) = match a.kind {
            AttentionKind::Lsh => (true, false),
            AttentionKind::Synthesizer => (false, false),
            _ => (true, true),
        };
        if use_q {
            put(p("attn.wq"), vec![d, d]);
            put(p("attn.bq"), vec![d]);
        }
        if use_k {
            put(p("attn.wk"), vec![d, d]);
            put(p("attn.bk"), vec![d]);
        }
        put(p("attn.wv"), vec![d, d]);
        put(p("attn.bv"), vec![d]);
        put(p("attn.wo"), vec![d, d]);
        put(p("attn.bo"), vec![d]);
        match a.kind {
            AttentionKind::Linformer => {
                let k = a.rank.unwrap_or(1);
                put(p("attn.e"), vec![k, l_max]);
                if !a.shared_projection() {
                    put(p("attn.f"), vec![k, l_max]);
                }
            }
            AttentionKind::Synthesizer => match a.synth_kind {
                Some(SynthKind::Random) => put(p("attn.synth_r"), vec![l_max, l_max]),
                _ => {
                    put(p("attn.synth_w1"), vec![d, d]);
                    put(p("attn.synth_b1"), vec![d]);
                    put(p("attn.synth_w2"), vec![d, l_max]);
                    put(p("attn.synth_b2"), vec![l_max]);
                }
            },
            _ => {}
        }
        put(p("ffn.w1"), vec![d, f]);
        put(p("ffn.b1"), vec![f]);
        put(p("ffn.w2"), vec![f, d]);
        put(p("ffn.b2"), vec![d]);
    }
    put("final_ln.gamma".into(), vec![d]);
    put("final_ln.beta".into(), vec![d]);
    let head_in = match config.head_kind {
        HeadKind::Classify => d,
        HeadKind::Match => 4 * d,
    };
    let m = config.mlp_dim();
    put("head.w1".into(), vec![head_in, m]);
    put("head.b1".into(), vec![m]);
    put("head.w2".into(), vec![m, config.num_classes]);
    put("head.b2".into(), vec![config.num_classes]);
    Ok(s)
}

fn is_bias(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last.starts_with('b') || last.starts_with("synth_b")
}

/// Deterministic initialization: normal weights with σ = 1/√model_dim,
/// zero biases, unit layer-norm gains.
pub fn build_encoder(config: &EncoderConfig, rng: &mut Rng) -> Result<ModelParams> {
    let shapes = param_shapes(config)?;
    let std = 1.0 / (config.model_dim as f32).sqrt();
    let mut tensors = BTreeMap::new();
    for (name, shape) in shapes {
        // one child stream per parameter, so adding a tensor never shifts the others
        let mut r = rng.fork(name_tag(&name));
        let t = if name.ends_with(".gamma") {
            Tensor::full(&shape, 1.0)
        } else if is_bias(&name) {
            Tensor::zeros(&shape)
        } else if name.ends_with("attn.e") || name.ends_with("attn.f") {
            r.normal_tensor(&shape, 1.0 / (config.max_len as f32).sqrt())
        } else {
            r.normal_tensor(&shape, std)
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { config: config.clone(), tensors })
}

fn name_tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Lifts every tensor onto the tape. Frozen random-synthesizer matrices
    /// stay constant even when `trainable`.
    pub fn bind(&self, trainable: bool) -> BoundParams<'_> {
        let frozen = self.config.attention.synth_fixed.unwrap_or(false);
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let learn = trainable && !(frozen && k.ends_with("attn.synth_r"));
                let v = if learn { Var::param(t.clone()) } else { Var::constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { config: &self.config, vars }
    }

    /// Zeros the readout MLP so every logit is exactly zero.
    pub fn zero_head(&mut self) {
        for (k, t) in self.tensors.iter_mut() {
            if k.starts_with("head.") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    /// Zeros every parameter that feeds attention logits, making each exact
    /// mechanism attend uniformly.
    pub fn zero_attention_logits(&mut self) {
        for (k, t) in self.tensors.iter_mut() {
            let logit_param = ["attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.synth_w2", "attn.synth_b2", "attn.synth_r"]
                .iter()
                .any(|s| k.ends_with(s));
            if logit_param {
                *t = Tensor::zeros(t.shape());
            }
        }
    }
}

/// Per-forward state: the random stream for hashing, feature redraws and
/// random sparsity, plus optional capture of attention weights.
pub struct ForwardCtx {
    pub rng: Rng,
    pub collect_weights: bool,
    /// `[layer][head]` weight matrices from the most recent encoding.
    pub weights: Vec<Vec<Tensor>>,
}

impl ForwardCtx {
    pub fn new(seed: u64) -> Self {
        ForwardCtx { rng: Rng::new(seed), collect_weights: false, weights: Vec::new() }
    }

    pub fn collecting(seed: u64) -> Self {
        ForwardCtx { collect_weights: true, ..Self::new(seed) }
    }
}

/// Final-layer CLS features plus the logits computed from them.
pub struct ForwardOutput {
    pub logits: Var,
    /// Input to the readout MLP (`[1, D]` or `[1, 4D]`).
    pub head_input: Var,
}

/// Base seed for features that are drawn once rather than per forward.
const FIXED_FEATURE_SEED: u64 = 0x5eed_fea7;

/// Encodes one sequence, returning the `[1, D]` CLS state after the final norm.
pub fn encode(p: &BoundParams, seq: &TokenSequence, ctx: &mut ForwardCtx) -> Result<Var> {
    let cfg = p.config;
    let n = seq.ids.len() + 1;
    if n > cfg.max_len {
        return Err(Error::Length { len: seq.ids.len(), max: cfg.max_len - 1 });
    }
    if seq.true_len == 0 {
        return Err(Error::Empty("token sequence"));
    }
    let mut ids = Vec::with_capacity(n);
    ids.push(cfg.vocab_size);
    for &t in &seq.ids {
        if t as usize >= cfg.vocab_size {
            return Err(Error::Param(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
        }
        ids.push(t as usize);
    }
    let mut valid = vec![true; seq.true_len + 1];
    valid.resize(n, false);
    let padded = seq.true_len + 1 < n;
    let key_valid = if padded { Some(valid.as_slice()) } else { None };

    let mut x = p
        .get("embed.tokens")?
        .gather_rows(&ids)?
        .add(&p.get("embed.positions")?.slice_rows(0, n)?)?;

    ctx.weights.clear();
    for l in 0..cfg.layers {
        let h = x.layer_norm(p.layer(l, "ln1.gamma")?, p.layer(l, "ln1.beta")?)?;
        let (attn, weights) = attention_block(p, l, &h, &valid, key_valid, ctx)?;
        if ctx.collect_weights {
            ctx.weights.push(weights);
        }
        x = x.add(&attn)?;
        let h = x.layer_norm(p.layer(l, "ln2.gamma")?, p.layer(l, "ln2.beta")?)?;
        let ff = h
            .matmul(p.layer(l, "ffn.w1")?)?
            .add_row(p.layer(l, "ffn.b1")?)?
            .relu()
            .matmul(p.layer(l, "ffn.w2")?)?
            .add_row(p.layer(l, "ffn.b2")?)?;
        x = x.add(&ff)?;
    }
    x.slice_rows(0, 1)?
        .layer_norm(p.get("final_ln.gamma")?, p.get("final_ln.beta")?)
}

fn linear(x: &Var, w: &Var, b: &Var) -> Result<Var> {
    x.matmul(w)?.add_row(b)
}

fn attention_block(
    p: &BoundParams,
    l: usize,
    h: &Var,
    valid: &[bool],
    key_valid: Option<&[bool]>,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Vec<Tensor>)> {
    let cfg = p.config;
    let spec = &cfg.attention;
    let n = h.shape()[0];
    let dh = cfg.head_dim();
    let n_real = valid.iter().filter(|&&b| b).count();
    let proj = |w: &str, b: &str| -> Result<Var> { linear(h, p.layer(l, w)?, p.layer(l, b)?) };
    let v = proj("attn.wv", "attn.bv")?;
    let q = match spec.kind {
        AttentionKind::Synthesizer => None,
        _ => Some(proj("attn.wq", "attn.bq")?),
    };
    let k = match spec.kind {
        AttentionKind::Synthesizer | AttentionKind::Lsh => None,
        _ => Some(proj("attn.wk", "attn.bk")?),
    };

    // Per-layer shared pieces, built once for all heads.
    let pattern = if spec.kind == AttentionKind::Pattern {
        Some(padded_pattern(spec, n, n_real, &mut ctx.rng)?)
    } else {
        None
    };
    let favor = match (spec.kind, spec.feature_map) {
        (AttentionKind::Kernel, Some(FeatureMap::FavorPlus)) => {
            let m = spec.num_features.unwrap_or(dh);
            let w = if spec.redraw_features() {
                favor_projection(dh, m, &mut ctx.rng)?
            } else {
                favor_projection(dh, m, &mut Rng::new(mix(FIXED_FEATURE_SEED, l as u64)))?
            };
            Some(w)
        }
        _ => None,
    };
    let linformer = if spec.kind == AttentionKind::Linformer {
        let e = p.layer(l, "attn.e")?.slice_cols(0, n)?;
        let f = if spec.shared_projection() { e.clone() } else { p.layer(l, "attn.f")?.slice_cols(0, n)? };
        Some((e, f))
    } else {
        None
    };
    let synth_dense = if spec.kind == AttentionKind::Synthesizer && spec.synth_kind != Some(SynthKind::Random) {
        Some(DenseSynthParams {
            w1: p.layer(l, "attn.synth_w1")?.clone(),
            b1: p.layer(l, "attn.synth_b1")?.clone(),
            w2: p.layer(l, "attn.synth_w2")?.clone(),
            b2: p.layer(l, "attn.synth_b2")?.clone(),
        })
    } else {
        None
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::new();
    for hd in 0..cfg.heads {
        let cut = |x: &Var| -> Result<Var> {
            if cfg.heads == 1 { Ok(x.clone()) } else { x.slice_cols(hd * dh, dh) }
        };
        let vh = cut(&v)?;
        let out: AttentionOutput = match spec.kind {
            AttentionKind::Full => full_attention(&cut(q.as_ref().expect("q"))?, &cut(k.as_ref().expect("k"))?, &vh, key_valid)?,
            AttentionKind::Pattern => pattern_attention(
                &cut(q.as_ref().expect("q"))?,
                &cut(k.as_ref().expect("k"))?,
                &vh,
                pattern.as_ref().expect("pattern"),
                key_valid,
            )?,
            AttentionKind::Linformer => {
                let (e, f) = linformer.as_ref().expect("projections");
                linformer_attention(&cut(q.as_ref().expect("q"))?, &cut(k.as_ref().expect("k"))?, &vh, e, f, key_valid)?
            }
            AttentionKind::Kernel => kernel_attention(
                &cut(q.as_ref().expect("q"))?,
                &cut(k.as_ref().expect("k"))?,
                &vh,
                spec.feature_map.unwrap_or(FeatureMap::Elu1),
                favor.as_ref(),
                key_valid,
            )?,
            AttentionKind::Lsh => {
                let opts = LshOptions {
                    rounds: spec.hash_rounds.unwrap_or(1),
                    bucket_size: spec.bucket_size.unwrap_or(32),
                    exclude_self: spec.exclude_self(),
                };
                lsh_attention(&cut(q.as_ref().expect("q"))?, &vh, opts, &mut ctx.rng, key_valid)?
            }
            AttentionKind::Sinkhorn => sinkhorn_attention(
                &cut(q.as_ref().expect("q"))?,
                &cut(k.as_ref().expect("k"))?,
                &vh,
                spec.block_size.unwrap_or(1),
                spec.iters(),
                key_valid,
            )?,
            AttentionKind::Synthesizer => match &synth_dense {
                Some(sp) => synthesizer_dense(h, &vh, sp, key_valid)?,
                None => synthesizer_random(p.layer(l, "attn.synth_r")?, &vh, key_valid)?,
            },
        };
        if ctx.collect_weights {
            if let Some(w) = out.weights {
                weights.push(w);
            }
        }
        heads.push(out.output);
    }
    let merged = if heads.len() == 1 { heads.pop().expect("one head") } else { Var::concat_cols(&heads)? };
    Ok((linear(&merged, p.layer(l, "attn.wo")?, p.layer(l, "attn.bo")?)?, weights))
}

/// Pattern built on the real tokens only, embedded in the padded length so
/// padding never shifts which real keys a real query sees.
fn padded_pattern(spec: &crate::attention::AttentionSpec, n: usize, n_real: usize, rng: &mut Rng) -> Result<SparsityPattern> {
    let kind = spec.pattern_kind.ok_or_else(|| Error::Config("pattern attention needs pattern_kind".into()))?;
    let inner = build_sparsity_pattern(kind, spec.pattern_params(), n_real, rng)?;
    if n_real == n {
        return Ok(inner);
    }
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            allowed[i * n + j] = if i < n_real && j < n_real { inner.allowed.get(i, j) } else { i == j };
        }
    }
    Ok(SparsityPattern { n, allowed: Mask::new(n, n, allowed)? })
}

fn mlp_head(p: &BoundParams, input: &Var) -> Result<Var> {
    input
        .matmul(p.get("head.w1")?)?
        .add_row(p.get("head.b1")?)?
        .relu()
        .matmul(p.get("head.w2")?)?
        .add_row(p.get("head.b2")?)
}

/// Class logits `[1, num_classes]` for one sequence.
pub fn forward_classify_bound(p: &BoundParams, seq: &TokenSequence, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
    if p.config.head_kind != HeadKind::Classify {
        return Err(Error::Config("model has a matching head; use forward_match".into()));
    }
    let cls = encode(p, seq, ctx)?;
    let logits = mlp_head(p, &cls)?;
    Ok(ForwardOutput { logits, head_input: cls })
}

/// Pair logits `[1, 2]` from `[X1, X2, X1*X2, X1-X2]`; both documents share
/// every encoder parameter.
pub fn forward_match_bound(
    p: &BoundParams,
    doc1: &TokenSequence,
    doc2: &TokenSequence,
    ctx: &mut ForwardCtx,
) -> Result<ForwardOutput> {
    if p.config.head_kind != HeadKind::Match {
        return Err(Error::Config("model has a classification head; use forward_classify".into()));
    }
    let x1 = encode(p, doc1, ctx)?;
    let mut w1 = std::mem::take(&mut ctx.weights);
    let x2 = encode(p, doc2, ctx)?;
    if ctx.collect_weights {
        w1.extend(std::mem::take(&mut ctx.weights));
        ctx.weights = w1;
    }
    let input = Var::concat_cols(&[x1.clone(), x2.clone(), x1.mul(&x2)?, x1.sub(&x2)?])?;
    let logits = mlp_head(p, &input)?;
    Ok(ForwardOutput { logits, head_input: input })
}

/// Inference-mode classification logits.
pub fn forward_classify(params: &ModelParams, seq: &TokenSequence, ctx: &mut ForwardCtx) -> Result<Tensor> {
    Ok(forward_classify_bound(&params.bind(false), seq, ctx)?.logits.value().clone())
}

/// Inference-mode matching logits.
pub fn forward_match(
    params: &ModelParams,
    doc1: &TokenSequence,
    doc2: &TokenSequence,
    ctx: &mut ForwardCtx,
) -> Result<Tensor> {
    Ok(forward_match_bound(&params.bind(false), doc1, doc2, ctx)?.logits.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionSpec;

    fn tiny(spec: AttentionSpec) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_len: 40,
            vocab_size: 20,
            attention: spec,
            head_kind: HeadKind::Classify,
            num_classes: 10,
            mlp_dim: None,
        }
    }

    fn seq(rng: &mut Rng, n: usize) -> TokenSequence {
        TokenSequence::unpadded((0..n).map(|_| rng.below(19) as u32).collect())
    }

    #[test]
    fn same_seed_same_parameters() {
        let c = tiny(AttentionSpec::full());
        assert_eq!(build_encoder(&c, &mut Rng::new(3)).unwrap(), build_encoder(&c, &mut Rng::new(3)).unwrap());
    }

    #[test]
    fn classify_emits_num_classes_logits() {
        let c = tiny(AttentionSpec::full());
        let m = build_encoder(&c, &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let out = forward_classify(&m, &seq(&mut rng, 12), &mut ForwardCtx::new(0)).unwrap();
        assert_eq!(out.shape(), &[1, 10]);
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = build_encoder(&tiny(AttentionSpec::full()), &mut Rng::new(1)).unwrap();
        m.zero_head();
        let out = forward_classify(&m, &seq(&mut Rng::new(5), 9), &mut ForwardCtx::new(0)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn over_length_input_is_an_error() {
        let m = build_encoder(&tiny(AttentionSpec::full()), &mut Rng::new(1)).unwrap();
        let r = forward_classify(&m, &seq(&mut Rng::new(5), 40), &mut ForwardCtx::new(0));
        assert!(matches!(r, Err(Error::Length { .. })));
    }

    #[test]
    fn attention_swap_keeps_other_shapes() {
        let base = param_shapes(&tiny(AttentionSpec::full())).unwrap();
        for spec in [AttentionSpec::linformer(4), AttentionSpec::reformer(1, 4), AttentionSpec::synthesizer(SynthKind::Dense)] {
            let other = param_shapes(&tiny(spec)).unwrap();
            let outside = |m: &BTreeMap<String, Vec<usize>>| -> Vec<(String, Vec<usize>)> {
                m.iter().filter(|(k, _)| !k.contains(".attn.")).map(|(k, v)| (k.clone(), v.clone())).collect()
            };
            assert_eq!(outside(&base), outside(&other));
        }
    }
}
