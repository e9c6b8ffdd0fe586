use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use htrm::cli::{run, Command, Overrides};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    /// Write a synthetic dataset.
    Synth,
    /// Train a model on a dataset.
    Train,
    /// Report MAE and OBO on a dataset split.
    Eval,
    /// Predict the density of one feature file.
    Infer,
    /// Write heatmaps and densities for one video.
    Viz,
}

#[derive(Debug, Parser)]
#[command(name = "htrm", about = "Repetitive action counting from per-frame features")]
struct Args {
    command: Cmd,
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let command = match args.command {
        Cmd::Synth => Command::Synth,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Infer => Command::Infer,
        Cmd::Viz => Command::Viz,
    };
    let overrides = Overrides {
        seed: args.seed,
        checkpoint: args.checkpoint,
        out: args.out,
    };
    match run(command, &args.config, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
