//! `salienteye`: label, train, profile, rank and eval from the command line.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "salienteye",
    version,
    about = "Personalized photo triage by predicted engagement and style"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for initialization and shuffling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Feature cache directory (falls back to $SALIENTEYE_CACHE).
    #[arg(long, global = true, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Backbone manifest (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label posts High/Average/Low by likes relative to their cohort; writes labeled.jsonl.
    Label {
        /// Account manifest (JSON lines).
        manifest: PathBuf,
    },
    /// Train the engagement head on labeled posts; writes head.json.
    Train {
        /// Labeled JSON lines from `label`.
        labeled: PathBuf,
    },
    /// Build a style profile from an account's most recent posts; writes profile.json and profile.bin.
    Profile {
        /// Account manifest (JSON lines).
        manifest: PathBuf,
    },
    /// Score and rank new photos; writes report.json and report.html.
    Rank {
        /// Photo files or directories of photos.
        #[arg(required = true)]
        photos: Vec<PathBuf>,
        /// Trained head from `train`.
        #[arg(long, value_name = "PATH")]
        head: PathBuf,
        /// Style profile from `profile`.
        #[arg(long, value_name = "PATH")]
        profile: PathBuf,
        /// engagement, style, combined or pareto.
        #[arg(long)]
        mode: Option<String>,
        /// Engagement weight in combined mode.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run the attribution and date-split evaluations configured under "eval".
    Eval,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
