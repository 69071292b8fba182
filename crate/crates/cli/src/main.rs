//! `argue-lab`: generate synthetic tasks, sample attributes, train soft
//! prompts, evaluate and sweep.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "argue-lab",
    version,
    about = "Attribute-guided soft prompt tuning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// baseline | argue | argue_n
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    /// general | class_specific
    #[arg(long)]
    pub negative: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task directory (task, vocabulary, attribute pool).
    Gen {
        /// JSON task spec; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Check an attribute pool's schema and its coverage of a task vocabulary.
    Validate {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        task: Option<PathBuf>,
        /// Directory for the run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Cluster and rank each class's pool, keeping one attribute per cluster.
    Sample {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a soft-prompt bank; writes a checkpoint and a loss history.
    Train {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Pre-sampled attributes; sampled from the pool when absent.
        #[arg(long)]
        attributes: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on task splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Comma-separated split names; all splits when absent.
        #[arg(long)]
        splits: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate once per value of one parameter.
    Sweep {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[command(flatten)]
        flags: TrainFlags,
        /// gamma | beta | clusters | shots
        #[arg(long)]
        param: String,
        /// Comma list (`0,1,2`) or inclusive range `start:end:step`.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Keep rows already present in the output and run only missing values.
        #[arg(long)]
        skip_existing: bool,
    },
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<argue_core::Error>() {
            return e.code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    match err.downcast_ref::<commands::CliError>() {
        Some(e) => e.code(),
        None => "error",
    }
}

fn single_line(err: &anyhow::Error) -> String {
    let msg = err
        .chain()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(": ");
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen {
            spec,
            seed,
            out,
            force,
        } => commands::gen(spec.as_deref(), seed, &out, force),
        Command::Validate {
            pool,
            task,
            out,
            force,
        } => commands::validate(&pool, task.as_deref(), out.as_deref(), force),
        Command::Sample {
            task,
            pool,
            clusters,
            seed,
            shots,
            out,
            force,
        } => commands::sample(&task, pool.as_deref(), clusters, seed, shots, &out, force),
        Command::Train {
            task,
            pool,
            attributes,
            flags,
            out,
            force,
        } => commands::train(
            &task,
            pool.as_deref(),
            attributes.as_deref(),
            &flags,
            &out,
            force,
        ),
        Command::Eval {
            checkpoint,
            task,
            splits,
            out,
            force,
        } => commands::eval(&checkpoint, &task, splits.as_deref(), &out, force),
        Command::Sweep {
            task,
            pool,
            flags,
            param,
            values,
            out,
            force,
            skip_existing,
        } => commands::sweep(
            &task,
            pool.as_deref(),
            &flags,
            &param,
            &values,
            &out,
            force,
            skip_existing,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={}", error_kind(&e), single_line(&e));
            ExitCode::FAILURE
        }
    }
}
