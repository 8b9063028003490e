use serde::{Deserialize, Serialize};

use crate::attention::AttentionSpec;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// CLS readout into a two-layer ReLU MLP.
    Classify,
    /// Two-tower matcher over `[X1, X2, X1*X2, X1-X2]`.
    Match,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Longest supported sequence including the CLS position.
    pub max_len: usize,
    /// Token ids are `0..vocab_size`; the CLS embedding is stored after them.
    pub vocab_size: usize,
    pub attention: AttentionSpec,
    pub head_kind: HeadKind,
    pub num_classes: usize,
    /// Hidden width of the readout MLP; defaults to `model_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
}

impl EncoderConfig {
    pub fn mlp_dim(&self) -> usize {
        self.mlp_dim.unwrap_or(self.model_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("mlp_dim", self.mlp_dim()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for CLS and one token".into()));
        }
        if self.head_kind == HeadKind::Match && self.num_classes != 2 {
            return Err(Error::Config("the matching head scores exactly 2 classes".into()));
        }
        self.attention.validate(self.max_len)
    }

    fn preset(
        layers: usize,
        heads: usize,
        model_dim: usize,
        ffn_dim: usize,
        max_len: usize,
        vocab_size: usize,
        head_kind: HeadKind,
        num_classes: usize,
    ) -> Self {
        EncoderConfig {
            layers,
            heads,
            model_dim,
            ffn_dim,
            max_len,
            vocab_size,
            attention: AttentionSpec::full(),
            head_kind,
            num_classes,
            mlp_dim: None,
        }
    }

    pub fn with_attention(mut self, attention: AttentionSpec) -> Self {
        self.attention = attention;
        self
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    /// Examples per backward pass; defaults to the whole batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<usize>,
    /// Evaluate every this many steps when an eval set is given (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.micro_batch == Some(0) {
            return Err(Error::Config("micro_batch must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// A named model + optimizer configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    /// Desk-scale presets are shrunk copies of the published settings.
    pub desk_scale: bool,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Training length in epochs where the published setting is epoch-based.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Byte vocabulary plus one padding id.
pub const BYTE_VOCAB: usize = 257;
/// ListOps vocabulary: digits, four operators, brackets, padding.
pub const LISTOPS_VOCAB: usize = 17;

fn train(steps: usize, batch_size: usize, learning_rate: f32, warmup_steps: usize, weight_decay: f32) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size,
        learning_rate,
        warmup_steps,
        weight_decay,
        seed: 0,
        micro_batch: None,
        eval_every: 0,
    }
}

const LR_NOTE: &str = "published learning rate kept verbatim; unusually high for Adam";

/// Published per-task settings, plus desk-scale counterparts.
pub fn presets() -> Vec<Preset> {
    use HeadKind::*;
    let full = |name: &str, encoder, train, epochs, note: Option<&str>| Preset {
        name: name.into(),
        desk_scale: false,
        encoder,
        train,
        epochs,
        note: note.map(String::from),
    };
    let desk = |name: &str, encoder, train, note: &str| Preset {
        name: name.into(),
        desk_scale: true,
        encoder,
        train,
        epochs: None,
        note: Some(note.into()),
    };
    let desk_note = "desk-scale: dimensions and lengths shrunk; lr 1e-3 instead of the published value";
    vec![
        full(
            "listops",
            EncoderConfig::preset(6, 8, 512, 2048, 2001, LISTOPS_VOCAB, Classify, 10),
            train(5000, 32, 0.05, 1000, 0.1),
            None,
            Some("batch, lr, warmup and weight decay not published for this task; text values reused"),
        ),
        full(
            "text",
            EncoderConfig::preset(6, 8, 512, 2048, 4097, BYTE_VOCAB, Classify, 2),
            train(20000, 32, 0.05, 8000, 0.1),
            None,
            Some(LR_NOTE),
        ),
        full(
            "matching",
            EncoderConfig::preset(4, 4, 128, 512, 4097, BYTE_VOCAB, Match, 2),
            train(5000, 32, 0.5, 1000, 0.1),
            None,
            Some(LR_NOTE),
        ),
        full(
            "image",
            EncoderConfig::preset(3, 4, 64, 128, 1025, 256, Classify, 10),
            train(200 * 50000 / 32, 32, 0.01, 1000, 0.0),
            Some(200),
            Some("qkv dim 64 used as the model width"),
        ),
        full(
            "pathfinder",
            EncoderConfig::preset(4, 8, 128, 128, 1025, 256, Classify, 2),
            train(200 * 160000 / 32, 32, 0.01, 1000, 0.0),
            Some(200),
            None,
        ),
        desk(
            "listops_desk",
            EncoderConfig::preset(2, 4, 64, 128, 129, LISTOPS_VOCAB, Classify, 10),
            train(600, 32, 1e-3, 60, 0.0),
            desk_note,
        ),
        desk(
            "text_desk",
            EncoderConfig::preset(2, 4, 64, 128, 1025, BYTE_VOCAB, Classify, 2),
            train(500, 8, 1e-3, 50, 0.0),
            desk_note,
        ),
        desk(
            "matching_desk",
            EncoderConfig::preset(2, 4, 32, 64, 513, BYTE_VOCAB, Match, 2),
            train(500, 8, 1e-3, 50, 0.0),
            desk_note,
        ),
        desk(
            "image_desk",
            EncoderConfig::preset(1, 2, 32, 64, 1025, 256, Classify, 10),
            train(300, 8, 1e-3, 30, 0.0),
            desk_note,
        ),
        desk(
            "pathfinder_desk",
            EncoderConfig::preset(1, 2, 32, 64, 1025, 256, Classify, 2),
            train(300, 8, 1e-3, 30, 0.0),
            desk_note,
        ),
        desk(
            "bench_desk",
            EncoderConfig::preset(1, 2, 32, 64, 4097, BYTE_VOCAB, Classify, 2),
            train(1, 8, 1e-3, 0, 0.0),
            "desk-scale throughput/memory model for the byte-level text task",
        ),
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_validate() {
        for p in presets() {
            p.encoder.validate().unwrap();
            p.train.validate().unwrap();
        }
    }

    #[test]
    fn published_values_verbatim() {
        let t = preset("text").unwrap();
        assert_eq!((t.encoder.layers, t.encoder.heads, t.encoder.model_dim, t.encoder.ffn_dim), (6, 8, 512, 2048));
        assert_eq!((t.train.steps, t.train.batch_size, t.train.learning_rate, t.train.weight_decay), (20000, 32, 0.05, 0.1));
        let m = preset("matching").unwrap();
        assert_eq!((m.encoder.layers, m.encoder.heads, m.encoder.model_dim, m.encoder.ffn_dim), (4, 4, 128, 512));
        assert_eq!(m.train.learning_rate, 0.5);
        let l = preset("listops").unwrap();
        assert_eq!(l.encoder.num_classes, 10);
        let i = preset("image").unwrap();
        assert_eq!((i.encoder.layers, i.encoder.heads, i.encoder.ffn_dim, i.encoder.model_dim), (3, 4, 128, 64));
        let p = preset("pathfinder").unwrap();
        assert_eq!((p.encoder.layers, p.encoder.heads, p.encoder.ffn_dim, p.encoder.model_dim), (4, 8, 128, 128));
    }

    #[test]
    fn divisibility_and_zero_layers_rejected() {
        let mut c = preset("listops_desk").unwrap().encoder;
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = preset("listops_desk").unwrap().encoder;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn warmup_longer_than_training_rejected() {
        let mut t = preset("text_desk").unwrap().train;
        t.warmup_steps = t.steps + 1;
        assert!(t.validate().is_err());
    }
}
