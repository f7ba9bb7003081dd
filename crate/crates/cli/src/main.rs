//! `reformer`: data generation, training, evaluation, attention timing and
//! memory reports for the duplication-task engine.
//!
//! Every command that writes files also writes `<output>.manifest.json`
//! (or `manifest.json` inside an output directory) holding the resolved
//! configuration, seed and tool version. Passing that manifest back through
//! `--config` reruns the command with identical settings.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use reformer::bench::{self, BenchKind, BenchSpec, MemSpec};
use reformer::checkpoint::{peek_dtype, Checkpoint};
use reformer::dup::{gen_batch, DupConfig, Split};
use reformer::model::Backprop;
use reformer::trainer::{self, EvalSetting, MetricRecord, TrainConfig};
use reformer::Scalar;

#[derive(Parser)]
#[command(name = "reformer", version, about = "LSH attention and reversible layers on the duplication task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print duplication-task sequences, one per line.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint under several attention settings (CSV).
    Eval(EvalArgs),
    /// Time attention kinds at a fixed token budget (CSV).
    BenchAttn(BenchArgs),
    /// Measure peak activation memory of one training step (CSV).
    MemReport(MemArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Reversible,
    Stored,
}

#[derive(Args)]
struct GenDataArgs {
    /// Largest symbol; words use 1..=N.
    #[arg(long, default_value_t = 127)]
    n: usize,
    #[arg(long, default_value_t = 31)]
    w_len: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Batch index within the split's stream.
    #[arg(long, default_value_t = 0)]
    step: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Manifest to rerun; overrides the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write here instead of stdout (also writes a manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    dup: DupConfig,
    count: usize,
    step: u64,
    split: SplitArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Named configuration, e.g. desk-dup-full or desk-dup-lsh4.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML training config, or a manifest written by a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reseeds initialization, data and hashing.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for the checkpoint, metrics and manifest.
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Metric stream path (NDJSON); defaults to <out-dir>/metrics.ndjson.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// LSH round counts to evaluate with, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    eval_hashes: Vec<usize>,
    /// Also evaluate with full attention.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write CSV here instead of stdout (also writes a manifest).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    checkpoint: PathBuf,
    settings: Vec<EvalSetting>,
    dup: DupConfig,
    batches: usize,
    batch_size: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<BenchKind>>,
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    chunk_len: Option<usize>,
    /// Fixed LSH bucket count (default scales with length).
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Dense runs whose score matrix exceeds this many bytes report `oom`.
    #[arg(long)]
    max_score_bytes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML bench spec or manifest; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MemArgs {
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    modes: Option<Vec<ModeArg>>,
    #[arg(long, value_delimiter = ',')]
    chunks: Option<Vec<usize>>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML memory spec or manifest; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct Manifest<C> {
    command: String,
    version: String,
    config: C,
}

/// Reads a TOML config, or the `config` section of a JSON manifest.
fn read_config<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: Manifest<C> = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        Ok(m.config)
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn write_manifest<C: Serialize>(path: &Path, command: &str, config: &C) -> Result<()> {
    let m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
    };
    fs::write(path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `body` to `out` (with a manifest) or to stdout.
fn emit<C: Serialize>(out: Option<&Path>, command: &str, config: &C, body: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, body).with_context(|| format!("writing {}", p.display()))?;
            write_manifest(&manifest_path(p), command, config)
        }
        None => {
            io::stdout().write_all(body.as_bytes())?;
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => GenDataConfig {
            dup: DupConfig {
                symbol_max: a.n,
                w_len: a.w_len,
                seed: a.seed,
            },
            count: a.count,
            step: a.step,
            split: a.split,
        },
    };
    let split = match cfg.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let batch = gen_batch(&cfg.dup, cfg.count, cfg.step, split)?;
    let mut body = Vec::new();
    batch.dump(&mut body)?;
    emit(a.out.as_deref(), "gen-data", &cfg, &String::from_utf8(body)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match (&a.preset, &a.config) {
        (Some(name), _) => trainer::preset(name)?,
        (None, Some(p)) => read_config(p)?,
        (None, None) => bail!("one of --preset or --config is required"),
    };
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    match a.dtype {
        Dtype::F32 => run_train::<f32>(&a, &cfg),
        Dtype::F64 => run_train::<f64>(&a, &cfg),
    }
}

fn run_train<S: Scalar>(a: &TrainArgs, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_manifest(&a.out_dir.join("manifest.json"), "train", cfg)?;
    let state = match &a.resume {
        Some(p) => Some(Checkpoint::<S>::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let metrics_path = a.metrics.clone().unwrap_or_else(|| a.out_dir.join("metrics.ndjson"));
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut sink = |r: &MetricRecord| -> reformer::Result<()> {
        writeln!(metrics, "{}", serde_json::to_string(r)?)?;
        if r.split == "eval" {
            log::info!("step {} eval {} loss {:.4} accuracy {:.4}", r.step, r.setting, r.loss, r.accuracy);
            metrics.flush()?;
        }
        Ok(())
    };
    let outcome = trainer::train::<S>(cfg, state, &mut sink)?;
    metrics.flush()?;
    let ckpt_path = a.out_dir.join("checkpoint.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    println!("checkpoint {} step {}", ckpt_path.display(), outcome.checkpoint.step);
    for r in &outcome.final_eval {
        println!("eval {} accuracy {:.4} loss {:.4}", r.setting, r.accuracy, r.loss);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let bytes = fs::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    match peek_dtype(&bytes)?.as_str() {
        "f64" => run_eval(&a, Checkpoint::<f64>::from_bytes(&bytes)?),
        _ => run_eval(&a, Checkpoint::<f32>::from_bytes(&bytes)?),
    }
}

fn run_eval<S: Scalar>(a: &EvalArgs, ckpt: Checkpoint<S>) -> Result<()> {
    let trained: TrainConfig = serde_json::from_value(ckpt.extra.clone()).context("checkpoint does not record its training configuration")?;
    let mut settings: Vec<EvalSetting> = Vec::new();
    if a.full {
        settings.push(EvalSetting::Full);
    }
    settings.extend(a.eval_hashes.iter().map(|&n| EvalSetting::Lsh(n)));
    if settings.is_empty() {
        settings.push(EvalSetting::of_model(&ckpt.model.config));
    }
    let cfg = EvalConfig {
        checkpoint: a.checkpoint.clone(),
        settings,
        dup: trained.dup,
        batches: a.batches.unwrap_or(trained.eval_batches),
        batch_size: a.batch_size.unwrap_or(trained.eval_batch_size),
    };
    let cells = trainer::eval_matrix(&[&ckpt.model], &cfg.settings, &cfg.dup, cfg.batches, cfg.batch_size)?;
    emit(a.out.as_deref(), "eval", &cfg, &trainer::matrix_csv(&cells))
}

fn bench_attn(a: BenchArgs) -> Result<()> {
    let mut spec: BenchSpec = match &a.config {
        Some(p) => read_config(p)?,
        None => BenchSpec::default(),
    };
    macro_rules! set {
        ($($f:ident = $v:expr),*) => { $(if let Some(v) = $v { spec.$f = v; })* };
    }
    set!(
        kinds = a.kinds.clone(),
        lengths = a.lengths.clone(),
        budget = a.budget,
        reps = a.reps,
        warmup = a.warmup,
        d_k = a.d_k,
        chunk_len = a.chunk_len,
        n_rounds = a.rounds,
        seed = a.seed
    );
    if a.buckets.is_some() {
        spec.n_buckets = a.buckets;
    }
    if a.max_score_bytes.is_some() {
        spec.max_score_bytes = a.max_score_bytes;
    }
    spec.validate()?;
    let rows = bench::bench_attn(&spec, |r| log::info!("{}", r.csv()))?;
    let mut body = format!("{}\n", bench::BENCH_CSV_HEADER);
    for r in &rows {
        body.push_str(&r.csv());
        body.push('\n');
    }
    emit(a.out.as_deref(), "bench-attn", &spec, &body)
}

fn mem_report(a: MemArgs) -> Result<()> {
    let mut spec: MemSpec = match &a.config {
        Some(p) => read_config(p)?,
        None => MemSpec::default(),
    };
    if let Some(v) = a.layers.clone() {
        spec.layers = v;
    }
    if let Some(v) = &a.modes {
        spec.modes = v
            .iter()
            .map(|m| match m {
                ModeArg::Reversible => Backprop::Reversible,
                ModeArg::Stored => Backprop::Stored,
            })
            .collect();
    }
    if let Some(v) = a.chunks.clone() {
        spec.chunks = v;
    }
    if let Some(v) = a.seq_len {
        spec.seq_len = v;
        spec.model.max_len = spec.model.max_len.max(v);
    }
    for (dst, v) in [
        (&mut spec.batch, a.batch),
        (&mut spec.model.d_model, a.d_model),
        (&mut spec.model.d_ff, a.d_ff),
        (&mut spec.model.n_heads, a.n_heads),
    ] {
        if let Some(v) = v {
            *dst = v;
        }
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let rows = bench::mem_report(&spec)?;
    let mut body = format!("{}\n", bench::MEM_CSV_HEADER);
    for r in &rows {
        body.push_str(&r.csv());
        body.push('\n');
    }
    emit(a.out.as_deref(), "mem-report", &spec, &body)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::BenchAttn(a) => bench_attn(a),
        Command::MemReport(a) => mem_report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
