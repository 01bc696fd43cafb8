//! Command-line front end: data ingestion, synthetic generation, training,
//! evaluation, forecasting, gradient checks and Sankey export.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod sankey;

use std::ffi::OsString;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use sankey::SankeyDocument;

#[derive(Parser, Debug)]
#[command(
    name = "sinkflow",
    version,
    about = "Forecast faction flows with a differentiable Sinkhorn layer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Turn a timeline CSV into marginals and transport plans.
    Ingest(commands::IngestArgs),
    /// Generate a synthetic timeline CSV from a transition kernel.
    Synth(commands::SynthArgs),
    /// Train a Sinkhorn-flow model and write a checkpoint.
    Train(commands::TrainArgs),
    /// Compare methods on a chronological split.
    Eval(commands::EvalArgs),
    /// Forecast the next transport plan.
    Predict(commands::ForecastArgs),
    /// Forecast several steps by feeding predictions back.
    Rollout(commands::ForecastArgs),
    /// Check the implicit Sinkhorn gradient against reference gradients.
    Gradcheck(commands::GradcheckArgs),
    /// Write observed and forecast flows as a Sankey document.
    ExportSankey(commands::SankeyArgs),
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::ExportSankey(a) => commands::export_sankey(a),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
