//! `more`: run, benchmark and diagnose online editors on the toy network.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use more_cli::commands;
use more_cli::config::{Experiment, FileConfig, Flags};
use more_cli::error::CliError;

#[derive(Parser)]
#[command(name = "more", version, about = "Online recursive editing experiments on a toy multimodal network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit a stream and report per-step metrics.
    Run(ExperimentArgs),
    /// Measure per-edit cost along a stream for one or more editors.
    Bench(ExperimentArgs),
    /// Interference, modality and drift diagnostics for one editor.
    Diagnose(ExperimentArgs),
    /// Check numerical kernels against reference computations.
    Oracle {
        /// sm, closedform, gradients, svd, nullspace or all
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML file; flags override it, it overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk, llava or blip2
    #[arg(long)]
    preset: Option<String>,
    /// more, target-match, prox, nullspace, finetune or unfrozen-a
    #[arg(long)]
    editor: Option<String>,
    #[arg(long)]
    edits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scale applied to the published preset ranks.
    #[arg(long)]
    rank_scale: Option<f64>,
    /// Also re-score every request under the final editor state.
    #[arg(long)]
    reeval_final: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<Experiment, CliError> {
        let file = match &self.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let flags = Flags {
            preset: self.preset.clone(),
            editor: self.editor.clone(),
            edits: self.edits,
            seed: self.seed,
            rank_scale: self.rank_scale,
            reeval_final: self.reeval_final,
            out: self.out.clone(),
        };
        Experiment::resolve(&flags, &file)
    }
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run(args) => commands::run(&args.resolve()?),
        Command::Bench(args) => {
            let exp = args.resolve()?;
            // A flag-selected editor benchmarks alone.
            let editors = if args.editor.is_some() {
                vec![exp.editor]
            } else {
                exp.bench_editors.clone()
            };
            commands::bench(&exp, &editors)
        }
        Command::Diagnose(args) => commands::diagnose_cmd(&args.resolve()?),
        Command::Oracle { suite, seed } => commands::oracle(&suite, seed),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
