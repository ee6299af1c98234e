use std::io;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use tandem_cli as cli;

#[derive(Parser)]
#[command(name = "tandem", version, about = "Conversational AutoML with a reasoning agent and a coding agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the four canonical instructions end to end and finalize.
    Run(cli::RunArgs),
    /// Interactive session on the terminal.
    Chat(cli::ChatArgs),
    /// Re-derive and verify a session from its journal.
    Replay {
        journal: PathBuf,
    },
    /// Score the agent against the reference pool on a suite of datasets.
    Bench(cli::BenchArgs),
    /// Serve the REST and event-stream API.
    Serve(cli::ServeArgs),
    /// Write the bundled datasets, fixtures, suite and schema.
    GenAssets {
        #[arg(long, default_value = "assets")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(io::stderr).with_max_level(tracing_subscriber::filter::LevelFilter::WARN).init();
    let (mut out, mut err) = (io::stdout(), io::stderr());
    let code = match &cli.command {
        Command::Run(a) => cli::cmd_run(a, &mut out, &mut err),
        Command::Chat(a) => cli::cmd_chat(a, &mut io::stdin().lock(), &mut out, &mut err),
        Command::Replay { journal } => cli::cmd_replay(journal, &mut out, &mut err),
        Command::Bench(a) => cli::cmd_bench(a, &mut out, &mut err),
        Command::Serve(a) => cli::cmd_serve(a, &mut out, &mut err),
        Command::GenAssets { out: dir } => cli::cmd_gen_assets(dir, &mut out, &mut err),
    };
    std::process::exit(code);
}
