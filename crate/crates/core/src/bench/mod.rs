//! Throughput and peak-memory benchmarking over sequence lengths.
//!
//! A suite is the cross product of mechanisms and lengths. Each cell builds
//! the preset encoder with the cell's attention, then times full training
//! steps (forward, backward, optimizer update) on random inputs and measures
//! the peak live tensor bytes of one forward and backward pass.

mod report;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use report::{
    config_hash, BenchReport, BenchRow, ExcludedCell, Fig3Row, ReportMetadata, CSV_COLUMNS, FIG3_COLUMNS,
    REPORT_SCHEMA, SCHEMA_VERSION,
};

use crate::attention::AttentionSpec;
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::meter::measure_scope;
use crate::model::{build_encoder, loss_and_grads, preset, EncoderConfig, Example, ForwardCtx, HeadKind, ModelParams, TrainConfig, Trainer};
use crate::rng::{mix, Rng};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "ARENA_SEED";

/// One benchmarked model: an attention mechanism inside a named preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchEntry {
    pub attention: AttentionSpec,
    pub preset: String,
    /// Report label; defaults to the mechanism name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl BenchEntry {
    pub fn new(attention: AttentionSpec, preset: &str) -> Self {
        BenchEntry { attention, preset: preset.into(), label: None }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.attention.name())
    }
}

/// Externally measured task quality merged into report rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetric {
    pub mechanism: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<f64>,
}

fn default_lengths() -> Vec<usize> {
    vec![1024, 2048, 3072, 4096]
}
fn default_batch() -> usize {
    8
}
fn default_warmup() -> usize {
    10
}
fn default_measured() -> usize {
    50
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub mechanisms: Vec<BenchEntry>,
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_measured")]
    pub measured_steps: usize,
    /// Examples per backward pass during timed steps.
    #[serde(default = "default_one")]
    pub micro_batch: usize,
    /// Examples in the single pass whose peak bytes are recorded.
    #[serde(default = "default_one")]
    pub memory_batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub task_metrics: Vec<TaskMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware_note: Option<String>,
}

impl SuiteConfig {
    pub fn new(mechanisms: Vec<BenchEntry>) -> Self {
        SuiteConfig {
            mechanisms,
            lengths: default_lengths(),
            batch_size: default_batch(),
            warmup_steps: default_warmup(),
            measured_steps: default_measured(),
            micro_batch: 1,
            memory_batch: 1,
            seed: None,
            task_metrics: Vec::new(),
            hardware_note: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The configured seed, else `ARENA_SEED`, else 0.
    pub fn resolved_seed(&self) -> Result<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        seed_from_env()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mechanisms.is_empty() {
            return Err(Error::Config("mechanism list is empty".into()));
        }
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Config("lengths must be a non-empty list of positive values".into()));
        }
        if self.measured_steps < 1 {
            return Err(Error::Config("measured_steps must be at least 1".into()));
        }
        if self.batch_size < 1 || self.micro_batch < 1 || self.memory_batch < 1 {
            return Err(Error::Config("batch_size, micro_batch and memory_batch must be at least 1".into()));
        }
        let longest = self.lengths.iter().copied().max().unwrap_or(0);
        for m in &self.mechanisms {
            let enc = cell_encoder(m)?;
            if longest + 1 > enc.max_len {
                return Err(Error::Config(format!(
                    "length {longest} plus CLS exceeds max_len {} of preset {}",
                    enc.max_len, m.preset
                )));
            }
        }
        Ok(())
    }
}

/// Reads `ARENA_SEED`, defaulting to 0 when unset.
pub fn seed_from_env() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn cell_encoder(entry: &BenchEntry) -> Result<EncoderConfig> {
    let enc = preset(&entry.preset)?.encoder.with_attention(entry.attention.clone());
    enc.validate()?;
    Ok(enc)
}

/// A model and batch ready to benchmark at one sequence length.
pub struct BenchModel {
    pub params: ModelParams,
    pub seq_len: usize,
    data: Vec<Example>,
    seed: u64,
}

impl BenchModel {
    /// Builds `config` and `batch` random examples of `seq_len` tokens each.
    pub fn new(config: &EncoderConfig, seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        if seq_len + 1 > config.max_len {
            return Err(Error::Length { len: seq_len + 1, max: config.max_len });
        }
        let params = build_encoder(config, &mut Rng::new(mix(seed, 1)))?;
        let mut rng = Rng::new(mix(seed, 2));
        let random_seq = |rng: &mut Rng| {
            TokenSequence::unpadded((0..seq_len).map(|_| rng.below(config.vocab_size) as u32).collect())
        };
        let data = (0..batch)
            .map(|_| {
                let label = rng.below(config.num_classes);
                match config.head_kind {
                    HeadKind::Classify => Example::single(random_seq(&mut rng), label),
                    HeadKind::Match => {
                        let a = random_seq(&mut rng);
                        Example::pair(a, random_seq(&mut rng), label)
                    }
                }
            })
            .collect();
        Ok(BenchModel { params, seq_len, data, seed })
    }

    pub fn batch_size(&self) -> usize {
        self.data.len()
    }

    fn trainer(&self, micro_batch: usize) -> Result<Trainer> {
        Trainer::new(TrainConfig {
            steps: 1,
            batch_size: self.data.len(),
            learning_rate: 1e-4,
            warmup_steps: 0,
            weight_decay: 0.0,
            seed: self.seed,
            micro_batch: Some(micro_batch),
            eval_every: 0,
        })
    }
}

/// Full training steps per second over `steps` timed steps after `warmup`
/// untimed ones.
pub fn measure_throughput(model: &mut BenchModel, warmup: usize, steps: usize, micro_batch: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Config("measured steps must be at least 1".into()));
    }
    let mut trainer = model.trainer(micro_batch.max(1))?;
    let batch: Vec<&Example> = model.data.iter().collect();
    for _ in 0..warmup {
        trainer.step_on(&mut model.params, &batch)?;
    }
    let start = Instant::now();
    for _ in 0..steps {
        trainer.step_on(&mut model.params, &batch)?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(steps as f64 / secs.max(f64::MIN_POSITIVE))
}

/// Peak live tensor bytes of one forward and backward pass over the batch.
pub fn measure_memory(model: &BenchModel) -> Result<usize> {
    let batch: Vec<&Example> = model.data.iter().collect();
    let mut ctx = ForwardCtx::new(mix(model.seed, 3));
    let (res, peak) = measure_scope(|| loss_and_grads(&model.params, &batch, &mut ctx).map(|_| ()));
    res?;
    Ok(peak)
}

fn with_context(e: Error, mech: &str, len: usize) -> String {
    format!("{mech} at length {len}: {e}")
}

/// Runs every (mechanism, length) cell in order. A failing cell is recorded
/// in its row and the suite continues.
pub fn run_suite(config: &SuiteConfig) -> Result<BenchReport> {
    run_suite_with(config, |_| {})
}

/// As [`run_suite`], calling `progress` with a line per finished cell.
pub fn run_suite_with(config: &SuiteConfig, mut progress: impl FnMut(&str)) -> Result<BenchReport> {
    config.validate()?;
    let seed = config.resolved_seed()?;
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (mi, entry) in config.mechanisms.iter().enumerate() {
        let enc = cell_encoder(entry)?;
        let label = entry.label();
        for &len in &config.lengths {
            let cell_seed = mix(mix(seed, mi as u64), len as u64);
            let metric = config.task_metrics.iter().find(|t| t.mechanism == label && t.task == entry.preset);
            let memory = BenchModel::new(&enc, len, config.memory_batch, cell_seed)
                .and_then(|m| measure_memory(&m))
                .map_err(|e| with_context(e, &label, len));
            if entry.attention.mask_emulated() {
                excluded.push(ExcludedCell {
                    mechanism: label.clone(),
                    task: entry.preset.clone(),
                    seq_len: len,
                    peak_tensor_bytes: memory.as_ref().ok().map(|&b| b as u64),
                    reason: "mask-emulated pattern attention is not ranked for speed".into(),
                    error: memory.err(),
                });
                progress(&format!("{label} n={len}: excluded from speed ranking"));
                continue;
            }
            let speed = match &memory {
                Err(e) => Err(e.clone()),
                Ok(_) => BenchModel::new(&enc, len, config.batch_size, cell_seed)
                    .and_then(|mut m| {
                        measure_throughput(&mut m, config.warmup_steps, config.measured_steps, config.micro_batch)
                    })
                    .map_err(|e| with_context(e, &label, len)),
            };
            let error = speed.as_ref().err().cloned();
            let row = BenchRow {
                mechanism: label.clone(),
                task: entry.preset.clone(),
                seq_len: len,
                batch_size: config.batch_size,
                steps_per_sec: speed.ok(),
                peak_tensor_bytes: memory.ok().map(|b| b as u64),
                relative_speedup_vs_full: None,
                accuracy: metric.and_then(|m| m.accuracy),
                span: metric.and_then(|m| m.span),
                error,
            };
            progress(&row.summary());
            rows.push(row);
        }
    }
    report::fill_speedups(&mut rows, &config.mechanisms);
    Ok(BenchReport {
        metadata: ReportMetadata::new(config, seed)?,
        rows,
        excluded,
    })
}
