//! `grape`: index corpora, rank queries, train and evaluate rewrite
//! policies, and run the paired reward-mode comparison.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Globals, PolicyChoice};

#[derive(Parser)]
#[command(name = "grape", version, about = "Rank-rewarded group policy optimization for query rewriting")]
struct Cli {
    /// Seed for training and, unless `testbed_seed` is configured, the testbed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for outputs and the manifest.
    #[arg(long, global = true, default_value = "grape-out")]
    out_dir: PathBuf,
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a corpus (text or `.bin`) into an index file.
    Index {
        corpus: PathBuf,
        /// Where to write the index (default: `<out-dir>/index.txt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank an index against one query.
    Rank {
        index: PathBuf,
        /// Query vector, comma or space separated.
        #[arg(long, conflicts_with = "item")]
        vector: Option<String>,
        /// Use this item's embedding as the query.
        #[arg(long)]
        item: Option<u64>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Also report this item's rank.
        #[arg(long)]
        target: Option<u64>,
    },
    /// Train a rewrite policy and write a run directory.
    Train {
        /// Leave format-failed rewrites out of group reward statistics
        /// (same as `exclude_invalid_from_stats = true`).
        #[arg(long)]
        exclude_invalid_from_stats: bool,
    },
    /// Recall table and reward histograms for a policy on a saved testbed.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory written by `train` under `testbed/`.
        #[arg(long)]
        testbed: PathBuf,
        /// Recall cut-offs, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "checkpoint")]
        policy: PolicyChoice,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Train once per reward mode on one testbed and compare.
    InflateDemo {
        /// Testbed/training overrides in config syntax.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Exit with status 3 unless the inflation pattern appears.
        #[arg(long)]
        check: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let g = Globals {
        seed: cli.seed,
        out_dir: cli.out_dir,
        config: cli.config,
    };
    let result = match &cli.command {
        Command::Index { corpus, out } => commands::index(&g, corpus, out.as_deref()),
        Command::Rank {
            index,
            vector,
            item,
            k,
            target,
        } => commands::rank(index, vector.as_deref(), *item, *k, *target),
        Command::Train { exclude_invalid_from_stats } => commands::train_cmd(&g, *exclude_invalid_from_stats),
        Command::Eval {
            checkpoint,
            testbed,
            k,
            policy,
            bins,
        } => commands::eval(&g, checkpoint.as_deref(), testbed, k.as_deref(), *policy, *bins),
        Command::InflateDemo { spec, check } => commands::inflate_demo(&g, spec.as_deref(), *check),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
