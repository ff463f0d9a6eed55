//! `vbatch`: corpus generation, training benchmarks and optimization
//! ablations, reporting CSV.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors
//! (including a corpus the chosen model cannot run on).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vbatch_core::engine::EngineOptions;
use vbatch_core::error::TrainError;
use vbatch_core::graph::{generate_corpus, parse_graphs, write_graphs, CorpusSpec, InputGraph};
use vbatch_core::models::{LossKind, ModelKind, ModelPreset};
use vbatch_core::trainer::{train, RunReport, TrainerConfig};

#[derive(Debug, Parser)]
#[command(name = "vbatch", version, about = "Batched training of vertex functions over input graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic graph corpus.
    Gen(GenArgs),
    /// Train a model and report one CSV row per epoch.
    Bench(BenchArgs),
    /// Train under all eight optimization settings and compare timings.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// `cbt:L:count`, `chain:n:count` or `random:n:N:count:seed` (n may be `lo-hi`).
    kind: CorpusSpec,
    /// Output file.
    #[arg(short, long)]
    out: PathBuf,
    /// Length of each vertex's input record; 0 writes no inputs.
    #[arg(long, default_value_t = 8)]
    input_dim: usize,
    /// Seed for the input records.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// tree-lstm, tree-fc, fixed-lstm or var-lstm.
    model: ModelKind,
    /// Corpus file produced by `vbatch gen`.
    corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Graphs per mini-batch.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// softmax-xent or mse; defaults to the model's own loss.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Children per vertex; defaults to 2 for trees and 1 for chains.
    #[arg(long)]
    arity: Option<usize>,
    /// One vertex per batching task.
    #[arg(long)]
    serial: bool,
    /// Write the CSV here instead of standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    no_lazy: bool,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_streaming: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Serialize)]
struct AblationRow {
    lazy: bool,
    fusion: bool,
    streaming: bool,
    total_s: f64,
    compute_s: f64,
    speedup: f64,
    final_loss: f64,
    kernel_dispatches: u64,
    bytes_copied: u64,
    barrier_waits: u64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Incompatible(_) | TrainError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), Failure> {
    let graphs = generate_corpus(&a.kind, a.input_dim, a.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    write_graphs(&a.out, &graphs).context("writing corpus")?;
    eprintln!("wrote {} graphs to {}", graphs.len(), a.out.display());
    Ok(())
}

struct Loaded {
    corpus: Vec<InputGraph>,
    preset: ModelPreset,
    parse_s: f64,
}

fn load(m: &ModelArgs) -> Result<Loaded, Failure> {
    let t = std::time::Instant::now();
    let corpus = parse_graphs(&m.corpus).context("reading corpus")?;
    let parse_s = t.elapsed().as_secs_f64();
    let input_dim = corpus
        .iter()
        .filter_map(InputGraph::ext_inputs)
        .flatten()
        .map(Vec::len)
        .find(|&n| n > 0)
        .unwrap_or(1);
    let mut preset = ModelPreset::new(m.model, m.hidden, input_dim);
    if let Some(a) = m.arity {
        preset = preset.with_arity(a);
    }
    if let Some(l) = m.loss {
        preset = preset.with_loss(l);
    }
    Ok(Loaded { corpus, preset, parse_s })
}

fn config(m: &ModelArgs, engine: EngineOptions) -> TrainerConfig {
    TrainerConfig {
        batch_size: m.batch,
        epochs: m.epochs,
        lr: m.lr,
        seed: m.seed,
        engine,
        serial: m.serial,
    }
}

fn run_once(l: &Loaded, cfg: &TrainerConfig) -> Result<RunReport, Failure> {
    let mut r = train(&l.preset, &l.corpus, cfg)?;
    r.corpus_parses = 1;
    if let Some(first) = r.rows.first_mut() {
        first.t_graph_io_s += l.parse_s;
    }
    Ok(r)
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let l = load(&a.model)?;
    let opts = EngineOptions::with_flags(!a.no_lazy, !a.no_fusion, !a.no_streaming);
    let report = run_once(&l, &config(&a.model, opts))?;
    write_csv(a.model.csv.as_deref(), &report.rows)?;
    eprintln!(
        "{} epochs, final loss {:.6}, {:.3} s total",
        report.rows.len(),
        report.final_loss(),
        report.total_s()
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<(), Failure> {
    let l = load(&a.model)?;
    let mut rows: Vec<AblationRow> = Vec::with_capacity(8);
    for opts in EngineOptions::grid() {
        let r = run_once(&l, &config(&a.model, opts))?;
        rows.push(AblationRow {
            lazy: opts.lazy,
            fusion: opts.fusion,
            streaming: opts.streaming,
            total_s: r.total_s(),
            compute_s: r.rows.iter().map(|x| x.t_compute_s).sum(),
            speedup: 1.0,
            final_loss: r.final_loss(),
            kernel_dispatches: r.rows.iter().map(|x| x.kernel_dispatches).sum(),
            bytes_copied: r.rows.iter().map(|x| x.bytes_copied).sum(),
            barrier_waits: r.barrier_waits,
        });
    }
    let base = rows[0].total_s;
    for row in &mut rows[1..] {
        row.speedup = base / row.total_s;
    }
    write_csv(a.model.csv.as_deref(), &rows)
}

fn write_csv<T: Serialize>(path: Option<&Path>, rows: &[T]) -> Result<(), Failure> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r).context("writing CSV")?;
    }
    w.flush().context("writing CSV")?;
    Ok(())
}
