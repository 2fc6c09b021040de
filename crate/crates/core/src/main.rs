//! `kadapter` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on invalid input or
//! configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kadapter::cli;

#[derive(Parser)]
#[command(
    name = "kadapter",
    about = "Knowledge adapters over a frozen transformer backbone",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (fact, dep, or cloze).
    Gen {
        /// Corpus kind: fact | dep | cloze
        kind: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        entities: usize,
        #[arg(long, default_value_t = 8)]
        relations: usize,
        #[arg(long, default_value_t = 2000)]
        examples: usize,
        /// Query count (cloze only).
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train a knowledge adapter (task fact or dep) with a frozen backbone.
    Pretrain {
        config: PathBuf,
    },
    /// Fine-tune on a downstream task with adapters frozen.
    Finetune {
        config: PathBuf,
        /// Comma-separated adapter checkpoints to fuse.
        #[arg(long, value_delimiter = ',', conflicts_with = "no_adapters")]
        adapters: Vec<PathBuf>,
        /// Run the backbone-only baseline.
        #[arg(long)]
        no_adapters: bool,
    },
    /// Evaluate a fine-tuned model checkpoint on a dataset's dev split.
    Eval {
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Cloze probing: train only an MLM layer per arm and report P@1.
    Probe {
        config: PathBuf,
        /// Adapter checkpoints for the adapter arm (baseline always runs).
        #[arg(long, value_delimiter = ',')]
        adapters: Vec<PathBuf>,
    },
    /// Two-arm catastrophic-forgetting experiment on an adversarial task pair.
    Forget {
        config: PathBuf,
    },
    /// Closed-form vs enumerated adapter parameter count.
    Paramcount {
        /// Use the paper-scale configuration.
        #[arg(long)]
        paper_config: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(args: Args) -> kadapter::Result<()> {
    match args.command {
        Command::Gen { kind, seed, entities, relations, examples, queries, out } => {
            cli::cmd_gen(
                &kind,
                &cli::GenArgs { seed, entities, relations, examples, queries, out_dir: out },
            )
        }
        Command::Pretrain { config } => cli::cmd_pretrain(&config),
        Command::Finetune { config, adapters, no_adapters } => {
            if !no_adapters && adapters.is_empty() {
                return Err(kadapter::Error::Argument(
                    "pass --adapters a.ckpt[,b.ckpt] or --no-adapters".into(),
                ));
            }
            cli::cmd_finetune(&config, &adapters)
        }
        Command::Eval { config, model } => cli::cmd_eval(&config, &model),
        Command::Probe { config, adapters } => cli::cmd_probe(&config, &adapters),
        Command::Forget { config } => cli::cmd_forget(&config),
        Command::Paramcount { paper_config, config } => {
            cli::cmd_paramcount(paper_config, config.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
