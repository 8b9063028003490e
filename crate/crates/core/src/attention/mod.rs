//! Attention mechanisms over `(Q, K, V)`.
//!
//! Every mechanism is a composition of differentiable [`Var`] ops, so the same
//! code serves inference (constants in, nothing retained) and training.
//! Mechanisms that materialize an exact row-stochastic weight matrix return it
//! in [`AttentionOutput::weights`].

mod full;
mod kernel;
mod linformer;
mod lsh;
mod pattern;
mod sinkhorn;
mod synthesizer;

use serde::{Deserialize, Serialize};

pub use full::{full_attention, masked_attention};
pub use kernel::{favor_projection, kernel_attention, positive_features, random_feature_map};
pub use linformer::linformer_attention;
pub use lsh::{lsh_attention, lsh_attention_with_buckets, lsh_buckets, LshOptions};
pub use pattern::{build_sparsity_pattern, pattern_attention, PatternParams, SparsityPattern};
pub use sinkhorn::{block_mix_attention, sinkhorn_attention, sinkhorn_normalize};
pub use synthesizer::{synthesizer_dense, synthesizer_random, DenseSynthParams};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Rows of queries processed together by the linear-cost mechanisms.
pub const QUERY_CHUNK: usize = 256;

/// Additive logit used to exclude an entry without a boolean mask.
pub(crate) const NEG_LARGE: f32 = -1e9;

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic `N×N` weights, present for exact mechanisms only.
    pub weights: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Full,
    Pattern,
    Linformer,
    Kernel,
    Lsh,
    Sinkhorn,
    Synthesizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Local,
    Strided,
    Fixed,
    Longformer,
    Bigbird,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    Elu1,
    FavorPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Dense,
    Random,
}

/// Mechanism selector plus its parameters.
///
/// Only the fields belonging to `kind` may be set; [`AttentionSpec::validate`]
/// rejects missing and foreign parameters alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern_kind: Option<PatternKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_projection: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<FeatureMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redraw_features: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_self: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinkhorn_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_kind: Option<SynthKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_fixed: Option<bool>,
}

impl AttentionSpec {
    fn bare(kind: AttentionKind) -> Self {
        AttentionSpec {
            kind,
            window: None,
            pattern_kind: None,
            stride: None,
            global_tokens: None,
            random_tokens: None,
            rank: None,
            shared_projection: None,
            feature_map: None,
            num_features: None,
            redraw_features: None,
            hash_rounds: None,
            bucket_size: None,
            exclude_self: None,
            block_size: None,
            sinkhorn_iters: None,
            synth_kind: None,
            synth_fixed: None,
        }
    }

    pub fn full() -> Self {
        Self::bare(AttentionKind::Full)
    }

    fn pattern(kind: PatternKind) -> Self {
        AttentionSpec {
            pattern_kind: Some(kind),
            ..Self::bare(AttentionKind::Pattern)
        }
    }

    pub fn local(window: usize) -> Self {
        AttentionSpec {
            window: Some(window),
            ..Self::pattern(PatternKind::Local)
        }
    }

    pub fn sparse_strided(stride: usize) -> Self {
        AttentionSpec {
            stride: Some(stride),
            ..Self::pattern(PatternKind::Strided)
        }
    }

    pub fn sparse_fixed(stride: usize) -> Self {
        AttentionSpec {
            stride: Some(stride),
            ..Self::pattern(PatternKind::Fixed)
        }
    }

    pub fn longformer(window: usize, global_tokens: usize) -> Self {
        AttentionSpec {
            window: Some(window),
            global_tokens: Some(global_tokens),
            ..Self::pattern(PatternKind::Longformer)
        }
    }

    pub fn bigbird(window: usize, global_tokens: usize, random_tokens: usize) -> Self {
        AttentionSpec {
            window: Some(window),
            global_tokens: Some(global_tokens),
            random_tokens: Some(random_tokens),
            ..Self::pattern(PatternKind::Bigbird)
        }
    }

    pub fn linformer(rank: usize) -> Self {
        AttentionSpec {
            rank: Some(rank),
            ..Self::bare(AttentionKind::Linformer)
        }
    }

    /// Linear Transformer: `elu + 1` feature map.
    pub fn linear_elu() -> Self {
        AttentionSpec {
            feature_map: Some(FeatureMap::Elu1),
            ..Self::bare(AttentionKind::Kernel)
        }
    }

    /// Performer: positive orthogonal random features.
    pub fn performer(num_features: usize) -> Self {
        AttentionSpec {
            feature_map: Some(FeatureMap::FavorPlus),
            num_features: Some(num_features),
            ..Self::bare(AttentionKind::Kernel)
        }
    }

    pub fn reformer(hash_rounds: usize, bucket_size: usize) -> Self {
        AttentionSpec {
            hash_rounds: Some(hash_rounds),
            bucket_size: Some(bucket_size),
            ..Self::bare(AttentionKind::Lsh)
        }
    }

    pub fn sinkhorn(block_size: usize) -> Self {
        AttentionSpec {
            block_size: Some(block_size),
            ..Self::bare(AttentionKind::Sinkhorn)
        }
    }

    pub fn synthesizer(kind: SynthKind) -> Self {
        AttentionSpec {
            synth_kind: Some(kind),
            ..Self::bare(AttentionKind::Synthesizer)
        }
    }

    /// Human-readable model name used in reports.
    pub fn name(&self) -> String {
        match self.kind {
            AttentionKind::Full => "transformer".into(),
            AttentionKind::Pattern => match self.pattern_kind {
                Some(PatternKind::Local) => "local_attention".into(),
                Some(PatternKind::Strided) => "sparse_transformer_strided".into(),
                Some(PatternKind::Fixed) => "sparse_transformer_fixed".into(),
                Some(PatternKind::Longformer) => "longformer".into(),
                Some(PatternKind::Bigbird) => "bigbird".into(),
                None => "pattern".into(),
            },
            AttentionKind::Linformer => "linformer".into(),
            AttentionKind::Kernel => match self.feature_map {
                Some(FeatureMap::FavorPlus) => "performer".into(),
                _ => "linear_transformer".into(),
            },
            AttentionKind::Lsh => "reformer".into(),
            AttentionKind::Sinkhorn => "sinkhorn_transformer".into(),
            AttentionKind::Synthesizer => match self.synth_kind {
                Some(SynthKind::Random) => "synthesizer_random".into(),
                _ => "synthesizer_dense".into(),
            },
        }
    }

    /// Whether the mechanism materializes exact attention weights.
    pub fn exposes_weights(&self) -> bool {
        matches!(
            self.kind,
            AttentionKind::Full | AttentionKind::Pattern | AttentionKind::Synthesizer
        )
    }

    /// Mask-emulated mechanisms cost as much as full attention and are left
    /// out of speed rankings.
    pub fn mask_emulated(&self) -> bool {
        self.kind == AttentionKind::Pattern
    }

    pub fn shared_projection(&self) -> bool {
        self.shared_projection.unwrap_or(true)
    }

    pub fn redraw_features(&self) -> bool {
        self.redraw_features.unwrap_or(true)
    }

    pub fn exclude_self(&self) -> bool {
        self.exclude_self.unwrap_or(true)
    }

    pub fn iters(&self) -> usize {
        self.sinkhorn_iters.unwrap_or(8)
    }

    pub fn pattern_params(&self) -> PatternParams {
        PatternParams {
            window: self.window.unwrap_or(0),
            stride: self.stride.unwrap_or(0),
            global_tokens: self.global_tokens.unwrap_or(0),
            random_tokens: self.random_tokens.unwrap_or(0),
        }
    }

    /// Checks that exactly the parameters of `kind` are present and positive.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let name = |f: &str| format!("{f} (for {:?} attention)", self.kind);
        let set: Vec<(&str, bool)> = vec![
            ("window", self.window.is_some()),
            ("pattern_kind", self.pattern_kind.is_some()),
            ("stride", self.stride.is_some()),
            ("global_tokens", self.global_tokens.is_some()),
            ("random_tokens", self.random_tokens.is_some()),
            ("rank", self.rank.is_some()),
            ("shared_projection", self.shared_projection.is_some()),
            ("feature_map", self.feature_map.is_some()),
            ("num_features", self.num_features.is_some()),
            ("redraw_features", self.redraw_features.is_some()),
            ("hash_rounds", self.hash_rounds.is_some()),
            ("bucket_size", self.bucket_size.is_some()),
            ("exclude_self", self.exclude_self.is_some()),
            ("block_size", self.block_size.is_some()),
            ("sinkhorn_iters", self.sinkhorn_iters.is_some()),
            ("synth_kind", self.synth_kind.is_some()),
            ("synth_fixed", self.synth_fixed.is_some()),
        ];
        let (required, optional): (Vec<&str>, Vec<&str>) = match self.kind {
            AttentionKind::Full => (vec![], vec![]),
            AttentionKind::Pattern => {
                let req = match self.pattern_kind {
                    Some(PatternKind::Local) => vec!["pattern_kind", "window"],
                    Some(PatternKind::Strided) | Some(PatternKind::Fixed) => {
                        vec!["pattern_kind", "stride"]
                    }
                    Some(PatternKind::Longformer) => vec!["pattern_kind", "window", "global_tokens"],
                    Some(PatternKind::Bigbird) => {
                        vec!["pattern_kind", "window", "global_tokens", "random_tokens"]
                    }
                    None => vec!["pattern_kind"],
                };
                (req, vec![])
            }
            AttentionKind::Linformer => (vec!["rank"], vec!["shared_projection"]),
            AttentionKind::Kernel => match self.feature_map {
                Some(FeatureMap::FavorPlus) => {
                    (vec!["feature_map", "num_features"], vec!["redraw_features"])
                }
                _ => (vec!["feature_map"], vec![]),
            },
            AttentionKind::Lsh => (vec!["hash_rounds", "bucket_size"], vec!["exclude_self"]),
            AttentionKind::Sinkhorn => (vec!["block_size"], vec!["sinkhorn_iters"]),
            AttentionKind::Synthesizer => (vec!["synth_kind"], vec!["synth_fixed"]),
        };
        for (field, present) in &set {
            let req = required.contains(field);
            if req && !present {
                return Err(Error::Config(format!("missing {}", name(field))));
            }
            if !req && !optional.contains(field) && *present {
                return Err(Error::Config(format!("unexpected {}", name(field))));
            }
        }
        let counts = [
            ("stride", self.stride),
            ("rank", self.rank),
            ("num_features", self.num_features),
            ("hash_rounds", self.hash_rounds),
            ("bucket_size", self.bucket_size),
            ("block_size", self.block_size),
            ("sinkhorn_iters", self.sinkhorn_iters),
        ];
        for (field, v) in counts {
            if v == Some(0) {
                return Err(Error::Param(format!("{} must be at least 1", name(field))));
            }
        }
        if let Some(w) = self.window {
            if w == 0 || w > max_len {
                return Err(Error::Param(format!(
                    "window {w} must lie in 1..={max_len}"
                )));
            }
        }
        if let Some(k) = self.rank {
            if k > max_len {
                return Err(Error::Param(format!("rank {k} exceeds max length {max_len}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_qkv(q: &Var, k: &Var, v: &Var) -> Result<(usize, usize)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: [ks, vs].concat(),
        });
    }
    Ok((qs[0], qs[1]))
}

pub(crate) fn check_valid(valid: Option<&[bool]>, n: usize) -> Result<()> {
    if let Some(v) = valid {
        if v.len() != n {
            return Err(Error::Shape {
                op: "key_valid",
                lhs: vec![n],
                rhs: vec![v.len()],
            });
        }
    }
    Ok(())
}

/// `[n, 1]` column with 1 for valid rows and 0 for padding.
pub(crate) fn valid_column(valid: &[bool]) -> Var {
    let data = valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Var::constant(Tensor::new(&[valid.len(), 1], data).expect("non-empty"))
}

/// Splits `0..n` into consecutive ranges of at most `chunk`.
pub(crate) fn chunks(n: usize, chunk: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n.div_ceil(chunk)).map(move |c| (c * chunk, chunk.min(n - c * chunk)))
}
