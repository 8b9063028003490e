use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arena::attention::AttentionSpec;
use arena::bench::{run_suite_with, seed_from_env, BenchReport, SuiteConfig, TaskMetric};
use arena::data::{encode_cifar10, load_examples, parse_cifar10, to_grayscale, DatasetFormat, DatasetSpec, LUMA_WEIGHTS};
use arena::metrics::{required_span, SpanOptions};
use arena::model::{build_encoder, evaluate, load_checkpoint, preset, save_checkpoint, train, EncoderConfig, TrainConfig};
use arena::tasks::listops::{gen_listops, label_histogram, write_tsv, ListOp, ListOpsConfig};
use arena::tasks::pathfinder::{gen_pathfinder, PathfinderConfig, PathfinderSidecar};
use arena::tasks::pixels::write_records;
use arena::{Error, Result, Rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::{Bench, Cli, Command, DataArgs, GenListops, GenPathfinder, IngestCifar, Report, Span, Train};

/// Exit status of a benchmark that wrote its report but had failing cells.
const PARTIAL_FAILURE: u8 = 3;

pub fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Ctx { config: cli.config, seed: cli.seed, out: cli.out };
    match cli.command {
        Command::GenListops(a) => gen_listops_cmd(&ctx, a),
        Command::GenPathfinder(a) => gen_pathfinder_cmd(&ctx, a),
        Command::IngestCifar(a) => ingest_cifar_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Bench(a) => bench_cmd(&ctx, a),
        Command::Span(a) => span_cmd(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn config_json(&self) -> Result<Option<Value>> {
        match &self.config {
            None => Ok(None),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(Some(serde_json::from_str(&text)?))
            }
        }
    }

    /// Config object with the generic `n` and `seed` keys split off.
    fn generator_config(&self) -> Result<(Map<String, Value>, Option<usize>, Option<u64>)> {
        let mut obj = match self.config_json()? {
            None => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => return Err(Error::Config("config file must hold a JSON object".into())),
        };
        let n = obj.remove("n").map(serde_json::from_value).transpose()?;
        let seed = obj.remove("seed").map(serde_json::from_value).transpose()?;
        Ok((obj, n, seed))
    }

    fn seed_or(&self, configured: Option<u64>) -> Result<u64> {
        match self.seed.or(configured) {
            Some(s) => Ok(s),
            None => seed_from_env(),
        }
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn emit(value: &Value) {
    println!("{}", serde_json::to_string(value).unwrap_or_default());
}

fn gen_listops_cmd(ctx: &Ctx, a: GenListops) -> Result<ExitCode> {
    let (obj, n, seed) = ctx.generator_config()?;
    let mut cfg = if obj.is_empty() {
        ListOpsConfig::new(2000, 10)
    } else {
        serde_json::from_value::<ListOpsConfig>(Value::Object(obj))?
    };
    if let Some(v) = a.max_len {
        cfg.max_len = v;
    }
    if let Some(v) = a.min_len {
        cfg.min_len = v;
    }
    if let Some(v) = a.max_depth {
        cfg.max_depth = v;
    }
    if let Some(v) = a.max_args {
        cfg.max_args = v;
    }
    if let Some(names) = a.operators {
        cfg.operators = names
            .iter()
            .map(|s| ListOp::from_name(&s.trim().to_uppercase()).ok_or_else(|| Error::Config(format!("unknown operator {s:?}"))))
            .collect::<Result<_>>()?;
    }
    let n = a.n.or(n).unwrap_or(1000);
    let seed = ctx.seed_or(seed)?;
    let samples = gen_listops(&cfg, &Rng::new(seed), n)?;
    let out = ctx.out_or("listops.tsv");
    ensure_parent(&out)?;
    write_tsv(&out, &samples)?;
    let summary = json!({
        "task": "listops",
        "seed": seed,
        "n": n,
        "config": cfg,
        "label_histogram": label_histogram(&samples),
        "output": out,
    });
    write_json(&sidecar_path(&out), &summary)?;
    emit(&summary);
    Ok(ExitCode::SUCCESS)
}

fn gen_pathfinder_cmd(ctx: &Ctx, a: GenPathfinder) -> Result<ExitCode> {
    let (obj, n, seed) = ctx.generator_config()?;
    let mut cfg = if obj.is_empty() {
        PathfinderConfig::for_size(a.size.unwrap_or(32))?
    } else {
        serde_json::from_value::<PathfinderConfig>(Value::Object(obj))?
    };
    if let Some(size) = a.size.filter(|&s| s != cfg.size) {
        let distractors = cfg.distractors;
        cfg = PathfinderConfig { distractors, ..PathfinderConfig::for_size(size)? };
    }
    if let Some(d) = a.distractors {
        cfg.distractors = d;
    }
    let n = a.n.or(n).unwrap_or(1000);
    let seed = ctx.seed_or(seed)?;
    let scenes = gen_pathfinder(&cfg, &Rng::new(seed), n)?;
    let out = ctx.out_or(if cfg.size == 128 { "pathx.bin" } else { "pathfinder.bin" });
    ensure_parent(&out)?;
    let records: Vec<_> = scenes.iter().map(|s| (s.pixels.clone(), s.label())).collect();
    write_records(&out, &records)?;
    let sidecar = PathfinderSidecar::new(&cfg, seed, &scenes);
    write_json(&sidecar_path(&out), &sidecar)?;
    emit(&json!({ "sidecar": sidecar, "output": out }));
    Ok(ExitCode::SUCCESS)
}

fn ingest_cifar_cmd(ctx: &Ctx, a: IngestCifar) -> Result<ExitCode> {
    let records = parse_cifar10(&a.input)?;
    let gray: Vec<_> = records.iter().map(|r| (to_grayscale(r), r.label)).collect();
    let out = ctx.out_or("cifar_gray.bin");
    ensure_parent(&out)?;
    write_records(&out, &gray)?;
    let mut hist = [0usize; 10];
    for r in &records {
        hist[r.label as usize] += 1;
    }
    let summary = json!({
        "task": "image",
        "source": a.input,
        "records": records.len(),
        "source_bytes": encode_cifar10(&records).len(),
        "grayscale": "round(0.299 R + 0.587 G + 0.114 B)",
        "luma_weights": LUMA_WEIGHTS,
        "label_histogram": hist,
        "output": out,
    });
    write_json(&sidecar_path(&out), &summary)?;
    emit(&summary);
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TrainJob {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    encoder: Option<EncoderConfig>,
    #[serde(default)]
    attention: Option<AttentionSpec>,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    train_data: Option<DatasetSpec>,
    #[serde(default)]
    eval_data: Option<DatasetSpec>,
}

fn parse_format(s: &str) -> Result<DatasetFormat> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown dataset format {s:?}; expected listops, text, pairs, records or cifar10")))
}

fn train_cmd(ctx: &Ctx, a: Train) -> Result<ExitCode> {
    let mut job: TrainJob = match ctx.config_json()? {
        Some(v) => serde_json::from_value(v)?,
        None => TrainJob::default(),
    };
    if a.preset.is_some() {
        job.preset = a.preset;
    }
    let base = job.preset.as_deref().map(preset).transpose()?;
    let mut encoder = match (job.encoder.take(), &base) {
        (Some(e), _) => e,
        (None, Some(p)) => p.encoder.clone(),
        (None, None) => return Err(Error::Config("train needs a preset or an encoder config".into())),
    };
    if let Some(att) = job.attention.take() {
        encoder.attention = att;
    }
    encoder.validate()?;
    let mut tc = match (job.train.take(), &base) {
        (Some(t), _) => t,
        (None, Some(p)) => p.train.clone(),
        (None, None) => return Err(Error::Config("train needs a preset or a train config".into())),
    };
    if let Some(s) = a.steps {
        tc.steps = s;
        tc.warmup_steps = tc.warmup_steps.min(s);
    }
    tc.seed = ctx.seed_or(job.seed)?;
    let format = a.format.as_deref().map(parse_format).transpose()?;
    let dataset = |spec: Option<DatasetSpec>, path: Option<PathBuf>| -> Result<Option<DatasetSpec>> {
        Ok(match (spec, path) {
            (Some(mut s), p) => {
                if let Some(p) = p {
                    s.path = p;
                }
                if let Some(f) = format {
                    s.format = f;
                }
                Some(s)
            }
            (None, Some(path)) => {
                let format = format.ok_or_else(|| Error::Config("--format is required with a data path".into()))?;
                Some(DatasetSpec { format, path, max_len: None, limit: None })
            }
            (None, None) => None,
        })
    };
    let train_spec = dataset(job.train_data.take(), a.train_data)?.ok_or_else(|| Error::Config("no training data given".into()))?;
    let eval_spec = dataset(job.eval_data.take(), a.eval_data)?;
    let data = load_examples(&train_spec, encoder.max_len)?;
    let eval = eval_spec.map(|s| load_examples(&s, encoder.max_len)).transpose()?;

    let mut params = build_encoder(&encoder, &mut Rng::new(tc.seed).fork(7))?;
    let history = train(&mut params, &tc, &data, eval.as_deref())?;
    let out = ctx.out_or("run");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_checkpoint(&params, &out.join("checkpoint.bin"))?;
    write_json(&out.join("history.json"), &history)?;
    let summary = json!({
        "mechanism": encoder.attention.name(),
        "preset": job.preset,
        "seed": tc.seed,
        "steps": tc.steps,
        "train_examples": data.len(),
        "final_loss": history.losses.last(),
        "accuracy": history.evals.last().map(|e| e.accuracy),
        "checkpoint": out.join("checkpoint.bin"),
    });
    write_json(&out.join("metrics.json"), &summary)?;
    emit(&summary);
    Ok(ExitCode::SUCCESS)
}

fn load_for(args: &DataArgs) -> Result<(arena::model::ModelParams, Vec<arena::model::Example>)> {
    let params = load_checkpoint(&args.checkpoint)?;
    let spec = DatasetSpec { format: parse_format(&args.format)?, path: args.data.clone(), max_len: None, limit: args.limit };
    let data = load_examples(&spec, params.config.max_len)?;
    Ok((params, data))
}

fn eval_cmd(ctx: &Ctx, a: DataArgs) -> Result<ExitCode> {
    let (params, data) = load_for(&a)?;
    let seed = ctx.seed_or(None)?;
    let acc = evaluate(&params, &data, seed)?;
    let summary = json!({
        "mechanism": params.config.attention.name(),
        "examples": data.len(),
        "accuracy": acc,
        "seed": seed,
    });
    if let Some(out) = &ctx.out {
        write_json(out, &summary)?;
    }
    emit(&summary);
    Ok(ExitCode::SUCCESS)
}

fn span_cmd(ctx: &Ctx, a: Span) -> Result<ExitCode> {
    let (params, data) = load_for(&a.data)?;
    let seed = ctx.seed_or(None)?;
    let opts = SpanOptions { exclude_cls: a.exclude_cls, normalized: a.normalized };
    let report = required_span(&params, &data, a.samples, seed, opts)?;
    let summary = json!({ "mechanism": params.config.attention.name(), "span": report });
    if let Some(out) = &ctx.out {
        write_json(out, &summary)?;
    }
    emit(&summary);
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(ctx: &Ctx, a: Bench) -> Result<ExitCode> {
    let text = match &ctx.config {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => return Err(Error::Config("bench requires --config <suite.json>".into())),
    };
    let mut cfg = SuiteConfig::from_json(&text)?;
    if let Some(s) = ctx.seed {
        cfg.seed = Some(s);
    }
    if let Some(v) = a.lengths {
        cfg.lengths = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = a.measured_steps {
        cfg.measured_steps = v;
    }
    let report = run_suite_with(&cfg, |line| eprintln!("{line}"))?;
    let files = report.write(&ctx.out_or("bench_out"))?;
    emit(&json!({ "files": files, "failures": report.has_failures(), "config_hash": report.metadata.config_hash }));
    Ok(if report.has_failures() { ExitCode::from(PARTIAL_FAILURE) } else { ExitCode::SUCCESS })
}

fn report_cmd(ctx: &Ctx, a: Report) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let mut report: BenchReport = serde_json::from_str(&text)?;
    if let Some(p) = &a.metrics {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let metrics: Vec<TaskMetric> = serde_json::from_str(&text)?;
        for row in &mut report.rows {
            if let Some(m) = metrics.iter().find(|m| m.mechanism == row.mechanism && m.task == row.task) {
                row.accuracy = m.accuracy.or(row.accuracy);
                row.span = m.span.or(row.span);
            }
        }
    }
    let dir = match &ctx.out {
        Some(d) => d.clone(),
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let files = report.write(&dir)?;
    emit(&json!({ "files": files, "rows": report.rows.len(), "fig3_rows": report.fig3_rows().len() }));
    Ok(ExitCode::SUCCESS)
}
