//! `anchorchain` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

mod commands;
mod config;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

#[derive(Debug, Parser)]
#[command(
    name = "anchorchain",
    version,
    about = "Coverage-anchored multi-hop retrieval experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: commands::Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("anchorchain: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ablate_steps_parse_as_a_list() {
        let cli = Cli::try_parse_from([
            "anchorchain",
            "ablate",
            "--qa",
            "q",
            "--index",
            "i",
            "--out",
            "o",
            "--steps",
            "3,5",
        ])
        .unwrap();
        let commands::Command::Ablate(a) = cli.command else {
            panic!("expected ablate");
        };
        assert_eq!(a.steps_list, vec![3, 5]);
        assert_eq!(a.variants.len(), 2);
    }
}
