//! `lfd`: train, generate, evaluate and analyze toy text-generation runs.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 3 for
//! failures during a run.

mod commands;
mod config;
mod fixtures;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use lfd_core::corpus::{AttributeMetric, Task, Tokenizer};

/// An error caused by the invocation or its inputs rather than the run.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "lfd",
    version,
    about = "Degenerative-expert training and diversity evaluation"
)]
struct Cli {
    /// Root for run directories when neither --out nor output_dir is given.
    #[arg(long, global = true, env = "LFD_OUT_ROOT")]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Continue the test split with a trained model.
    Generate {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the checkpoint selected during training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Generation file; references are written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Compute metrics for a generation file against references.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Run directory; enables perplexity and the run's metric settings.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated metric names.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<String>>,
        /// Directory for reports.jsonl and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Per-group log-perplexity across a run's epoch checkpoints.
    Dynamics {
        #[arg(long)]
        run: PathBuf,
        /// One attribute; all available ones when omitted.
        #[arg(long)]
        metric: Option<AttributeMetric>,
        /// Examples per group.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Average over sentences (split at ".") instead of examples.
        #[arg(long)]
        sentence_level: bool,
        /// Precomputed attribute scores; computed from the train split otherwise.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Score every example of a data file on the degenerative attributes.
    ScoreAttrs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        #[arg(long, value_parser = parse_tokenizer, default_value = "whitespace")]
        tokenizer: Tokenizer,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        overlap_n: usize,
        #[arg(long, default_value_t = 0.8)]
        bandwidth: f64,
        #[arg(long)]
        overwrite: bool,
    },
    /// Write the synthetic toy corpora and example configs.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        overwrite: bool,
    },
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "lm" => Ok(Task::Lm),
        "dialogue" => Ok(Task::Dialogue),
        "summarization" => Ok(Task::Summarization),
        _ => Err(format!("unknown task `{s}` (lm, dialogue, summarization)")),
    }
}

fn parse_tokenizer(s: &str) -> Result<Tokenizer, String> {
    match s {
        "whitespace" => Ok(Tokenizer::Whitespace),
        "char" => Ok(Tokenizer::Char),
        _ => Err(format!("unknown tokenizer `{s}` (whitespace, char)")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            overwrite,
        } => {
            let dir = commands::train(&config, out, cli.out_root.as_deref(), seed, overwrite)?;
            println!("{}", dir.display());
        }
        Command::Generate {
            run,
            checkpoint,
            out,
            seed,
            overwrite,
        } => {
            let path = commands::generate_cmd(&run, checkpoint.as_deref(), out, seed, overwrite)?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            generations,
            reference,
            run,
            checkpoint,
            metrics,
            out,
            overwrite,
        } => {
            let path = commands::evaluate_cmd(
                &generations,
                &reference,
                run.as_deref(),
                checkpoint.as_deref(),
                metrics,
                out,
                overwrite,
            )?;
            println!("{}", path.display());
        }
        Command::Dynamics {
            run,
            metric,
            n,
            sentence_level,
            scores,
            out,
            overwrite,
        } => {
            let path = commands::dynamics_cmd(commands::DynamicsArgs {
                run_dir: &run,
                metric,
                n,
                sentence_level,
                scores: scores.as_deref(),
                out,
                overwrite,
            })?;
            println!("{}", path.display());
        }
        Command::ScoreAttrs {
            data,
            task,
            tokenizer,
            out,
            overlap_n,
            bandwidth,
            overwrite,
        } => {
            commands::score_attrs_cmd(
                &data, task, tokenizer, &out, overlap_n, bandwidth, overwrite,
            )?;
            println!("{}", out.display());
        }
        Command::Fixtures {
            out,
            seed,
            overwrite,
        } => {
            if out.exists() && !overwrite && out.read_dir()?.next().is_some() {
                anyhow::bail!(UsageError(format!(
                    "{} is not empty; pass --overwrite",
                    out.display()
                )));
            }
            fixtures::write_fixtures(&out, seed)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

/// 2 for anything the user can fix by changing the invocation or inputs.
fn exit_code(err: &anyhow::Error) -> u8 {
    use lfd_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config { .. }
                | E::Parse { .. }
                | E::InvalidToken { .. }
                | E::LengthExceeded { .. }
                | E::Unimplemented(_) => 2,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 3,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound {
                2
            } else {
                3
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
