use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BenchEntry, SuiteConfig};
use crate::attention::AttentionKind;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema every emitted report satisfies.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/bench_report.schema.json");

/// Column order of the main CSV report.
pub const CSV_COLUMNS: [&str; 10] = [
    "mechanism",
    "task",
    "seq_len",
    "batch_size",
    "steps_per_sec",
    "peak_tensor_bytes",
    "relative_speedup_vs_full",
    "accuracy",
    "span",
    "error",
];

/// Column order of the accuracy / speed / memory CSV.
pub const FIG3_COLUMNS: [&str; 6] = ["mechanism", "task", "seq_len", "accuracy", "steps_per_sec", "peak_tensor_bytes"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: String,
    pub task: String,
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps_per_sec: Option<f64>,
    pub peak_tensor_bytes: Option<u64>,
    pub relative_speedup_vs_full: Option<f64>,
    pub accuracy: Option<f64>,
    pub span: Option<f64>,
    pub error: Option<String>,
}

impl BenchRow {
    pub fn summary(&self) -> String {
        match &self.error {
            Some(e) => format!("{} n={}: failed: {e}", self.mechanism, self.seq_len),
            None => format!(
                "{} n={}: {:.3} steps/s, {} peak tensor bytes",
                self.mechanism,
                self.seq_len,
                self.steps_per_sec.unwrap_or(f64::NAN),
                self.peak_tensor_bytes.unwrap_or(0)
            ),
        }
    }
}

/// A cell left out of the speed ranking; its memory is still recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedCell {
    pub mechanism: String,
    pub task: String,
    pub seq_len: usize,
    pub peak_tensor_bytes: Option<u64>,
    pub reason: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// RFC 3339 UTC.
    pub timestamp: String,
    pub hardware_note: String,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub measured_steps: usize,
    pub micro_batch: usize,
    pub memory_batch: usize,
    pub step_definition: String,
    pub memory_metric: String,
}

impl ReportMetadata {
    pub fn new(config: &SuiteConfig, seed: u64) -> Result<Self> {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let auto = format!(
            "{} {} CPU, {threads} hardware thread(s), single-threaded execution; desk-scale batch {} (published runs used 32 on TPU)",
            std::env::consts::OS,
            std::env::consts::ARCH,
            config.batch_size
        );
        Ok(ReportMetadata {
            schema_version: SCHEMA_VERSION,
            seed,
            config_hash: config_hash(config)?,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            hardware_note: match &config.hardware_note {
                Some(n) => format!("{n}; {auto}"),
                None => auto,
            },
            batch_size: config.batch_size,
            warmup_steps: config.warmup_steps,
            measured_steps: config.measured_steps,
            micro_batch: config.micro_batch,
            memory_batch: config.memory_batch,
            step_definition: "full training step: forward, backward and optimizer update".into(),
            memory_metric: "peak live tensor bytes of one forward and backward pass (not process RSS)".into(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<BenchRow>,
    pub excluded: Vec<ExcludedCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig3Row {
    pub mechanism: String,
    pub task: String,
    pub seq_len: usize,
    pub accuracy: f64,
    pub steps_per_sec: f64,
    pub peak_tensor_bytes: u64,
}

/// SHA-256 over the canonical JSON of the config with the seed resolved.
///
/// Object keys serialize in sorted order, so configs that differ only in key
/// order or in spelling out defaults hash identically.
pub fn config_hash(config: &SuiteConfig) -> Result<String> {
    let mut c = config.clone();
    c.seed = Some(c.resolved_seed()?);
    c.hardware_note = None;
    let canonical = serde_json::to_string(&serde_json::to_value(&c)?)?;
    Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

pub(super) fn fill_speedups(rows: &mut [BenchRow], entries: &[BenchEntry]) {
    let full: Vec<String> = entries.iter().filter(|e| e.attention.kind == AttentionKind::Full).map(BenchEntry::label).collect();
    let mut base: BTreeMap<(String, usize), f64> = BTreeMap::new();
    for r in rows.iter() {
        if let (true, Some(s)) = (full.contains(&r.mechanism), r.steps_per_sec) {
            base.entry((r.task.clone(), r.seq_len)).or_insert(s);
        }
    }
    for r in rows.iter_mut() {
        r.relative_speedup_vs_full = match (r.steps_per_sec, base.get(&(r.task.clone(), r.seq_len))) {
            (Some(s), Some(&b)) if b > 0.0 => Some(s / b),
            _ => None,
        };
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), ToString::to_string)
}

impl BenchReport {
    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some()) || self.excluded.iter().any(|c| c.error.is_some())
    }

    pub fn row(&self, mechanism: &str, seq_len: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mechanism == mechanism && r.seq_len == seq_len)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(CSV_COLUMNS).map_err(fail)?;
        for r in &self.rows {
            w.write_record([
                r.mechanism.clone(),
                r.task.clone(),
                r.seq_len.to_string(),
                r.batch_size.to_string(),
                opt(&r.steps_per_sec),
                opt(&r.peak_tensor_bytes),
                opt(&r.relative_speedup_vs_full),
                opt(&r.accuracy),
                opt(&r.span),
                opt(&r.error),
            ])
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Per mechanism and task, the longest measured length carrying an accuracy.
    pub fn fig3_rows(&self) -> Vec<Fig3Row> {
        let mut best: BTreeMap<(String, String), Fig3Row> = BTreeMap::new();
        for r in &self.rows {
            let (Some(accuracy), Some(steps_per_sec), Some(peak)) = (r.accuracy, r.steps_per_sec, r.peak_tensor_bytes) else {
                continue;
            };
            let key = (r.mechanism.clone(), r.task.clone());
            if best.get(&key).is_none_or(|b| b.seq_len < r.seq_len) {
                best.insert(
                    key,
                    Fig3Row {
                        mechanism: r.mechanism.clone(),
                        task: r.task.clone(),
                        seq_len: r.seq_len,
                        accuracy,
                        steps_per_sec,
                        peak_tensor_bytes: peak,
                    },
                );
            }
        }
        best.into_values().collect()
    }

    pub fn fig3_csv(&self) -> Result<Option<String>> {
        let rows = self.fig3_rows();
        if rows.is_empty() {
            return Ok(None);
        }
        let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(FIG3_COLUMNS).map_err(fail)?;
        for r in rows {
            w.write_record([
                r.mechanism,
                r.task,
                r.seq_len.to_string(),
                r.accuracy.to_string(),
                r.steps_per_sec.to_string(),
                r.peak_tensor_bytes.to_string(),
            ])
            .map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        Ok(Some(String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?))
    }

    /// Writes `report.json`, `report.csv` and, when accuracies exist,
    /// `fig3.csv` under `dir`, returning the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![(dir.join("report.json"), self.to_json()?), (dir.join("report.csv"), self.to_csv()?)];
        if let Some(f) = self.fig3_csv()? {
            files.push((dir.join("fig3.csv"), f));
        }
        for (p, text) in &files {
            fs::write(p, text).map_err(|e| Error::io(p, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}
