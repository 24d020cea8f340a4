use std::process::ExitCode;

use choicelab_cli::commands::{self, Cli, Command};
use clap::Parser;

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match &cli.command {
        Command::Generate(args) => commands::generate(args)?,
        Command::Train(args) => commands::train(args)?,
        Command::Evaluate(args) => commands::evaluate(args)?,
        Command::Inspect(args) => commands::inspect(args)?,
        Command::Reproduce(args) => {
            let failed = commands::reproduce(args)?;
            if failed > 0 {
                eprintln!("{failed} cells failed; see cells.csv");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
