//! `unirel`: build indexes, train, retrieve, rerank and analyse from one config.

mod commands;
mod config;
mod failure;
mod workspace;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::{Overrides, RunConfig};
use failure::{CliResult, Failure};

#[derive(Debug, Parser)]
#[command(name = "unirel", version, about = "Unified relevance toolkit for generative and multi-vector retrieval")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON config file (a manifest from an earlier run also works).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; one run at a time per directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    queries: Option<PathBuf>,
    #[arg(long, global = true, value_name = "FILE")]
    qrels: Option<PathBuf>,
    /// mvdr, gr, gr-pawa or gr-np.
    #[arg(long, global = true)]
    paradigm: Option<String>,
    /// Override any config key, e.g. `--set train.epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Vocabulary, BM25 index, n-gram trie and token-vector pool.
    Build,
    /// Train a model on the judged queries and write a checkpoint.
    Train,
    /// End-to-end retrieval: constrained decoding or token nearest neighbours.
    Retrieve,
    /// Exact rescoring of BM25 candidates in every configured direction.
    Rerank,
    /// Exact-match rates, low-rank diagnostics and heatmaps.
    Analyze {
        /// Export the alignment of the first query and its first candidate.
        #[arg(long)]
        heatmap: bool,
    },
    /// Collect the reports of earlier steps into one summary.
    Report,
    /// Write a synthetic corpus with queries and judgments.
    Synth {
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        words: Option<usize>,
        #[arg(long)]
        doc_len: Option<usize>,
        #[arg(long)]
        query_extra: Option<usize>,
    },
}

fn overrides(g: &Global, command: &Command) -> Overrides {
    let mut fields: Vec<(String, Value)> = Vec::new();
    let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
    for (key, v) in [("corpus", &g.corpus), ("queries", &g.queries), ("qrels", &g.qrels)] {
        if let Some(p) = v {
            fields.push((key.into(), path(p)));
        }
    }
    if let Some(p) = &g.paradigm {
        fields.push(("paradigm".into(), Value::String(p.clone())));
    }
    match command {
        Command::Analyze { heatmap: true } => fields.push(("analysis.heatmap".into(), Value::Bool(true))),
        Command::Synth { docs, words, doc_len, query_extra } => {
            for (key, v) in [("docs", docs), ("words", words), ("doc_len", doc_len), ("query_extra", query_extra)] {
                if let Some(v) = v {
                    fields.push((format!("synth.{key}"), (*v).into()));
                }
            }
        }
        _ => {}
    }
    Overrides { seed: g.seed, out: g.out.clone(), threads: g.threads, set: g.set.clone(), fields }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = RunConfig::resolve(cli.global.config.as_deref(), &overrides(&cli.global, &cli.command))?;
    if let Some(n) = config.threads {
        unirel::exec::init_thread_pool(n).map_err(|e| Failure::config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Build => commands::build(&config),
        Command::Train => commands::train_cmd(&config),
        Command::Retrieve => commands::retrieve(&config),
        Command::Rerank => commands::rerank_cmd(&config),
        Command::Analyze { .. } => commands::analyze(&config),
        Command::Report => commands::report(&config),
        Command::Synth { .. } => commands::synth(&config),
    }
}

fn main() {
    if let Err(f) = run(Cli::parse()) {
        eprintln!("error: {f}");
        std::process::exit(f.class.exit_code());
    }
}
