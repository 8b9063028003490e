mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "arena", version, about = "Long-sequence attention benchmarking toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON configuration file; individual flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed; falls back to the config file, then ARENA_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    /// Print failures to stderr as single-line JSON objects.
    #[arg(long, global = true)]
    pub json_errors: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a Long ListOps TSV file.
    GenListops(GenListops),
    /// Generate Pathfinder (32) or Path-X (128) pixel records.
    GenPathfinder(GenPathfinder),
    /// Convert a CIFAR-10 binary batch into grayscale pixel records.
    IngestCifar(IngestCifar),
    /// Train an encoder and write a checkpoint.
    Train(Train),
    /// Evaluate a checkpoint on a dataset.
    Eval(DataArgs),
    /// Measure throughput and peak tensor memory across lengths.
    Bench(Bench),
    /// Required attention span of a checkpoint on a dataset.
    Span(Span),
    /// Re-emit a benchmark report, merging task metrics.
    Report(Report),
}

#[derive(Args, Debug)]
pub struct GenListops {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long)]
    pub max_args: Option<usize>,
    /// Comma-separated operator names, e.g. MAX,MIN,MEDIAN,SUM_MOD.
    #[arg(long, value_delimiter = ',')]
    pub operators: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct GenPathfinder {
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side: 32 or 128.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub distractors: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IngestCifar {
    /// CIFAR-10 binary batch file.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Preset name; overrides the config file.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Dataset format: listops, text, pairs, records or cifar10.
    #[arg(long)]
    pub format: Option<String>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset format: listops, text, pairs, records or cifar10.
    #[arg(long)]
    pub format: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Span {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long)]
    pub exclude_cls: bool,
    #[arg(long)]
    pub normalized: bool,
}

#[derive(Args, Debug)]
pub struct Bench {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub measured_steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Report {
    /// A `report.json` written by `bench`.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON list of `{mechanism, task, accuracy?, span?}` objects.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json_errors;
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            if json {
                let obj = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
                eprintln!("{obj}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}
