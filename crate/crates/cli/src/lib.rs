//! Command-line driver: dataset generation, inference, evaluation,
//! gradient checking and training.

pub mod args;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

use std::ffi::OsString;
use std::io::Write;

use clap::{CommandFactory, FromArgMatches};

use args::{Cli, Command};
use config::RunConfig;
use error::{exit, CliError};

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
        }
    };
    match execute(&matches, &mut std::io::stdout()) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(matches: &clap::ArgMatches, out: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let cli = Cli::from_arg_matches(matches).map_err(CliError::usage)?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::Gen(a) => a.apply(sub, &mut cfg),
        Command::Infer(a) => a.apply(sub, &mut cfg),
        Command::Gradcheck(a) => a.apply(sub, &mut cfg),
        Command::Train(a) => a.apply(sub, &mut cfg),
        Command::Eval(_) | Command::Config(_) => {}
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cli.jobs)))?;
    pool.install(|| match &cli.command {
        Command::Gen(a) => commands::cmd_gen(a, &cfg, out),
        Command::Infer(a) => commands::cmd_infer(a, &cfg, out),
        Command::Eval(a) => commands::cmd_eval(a, &cfg, out),
        Command::Gradcheck(a) => commands::cmd_gradcheck(a, &cfg, out),
        Command::Train(a) => commands::cmd_train(a, &cfg, out),
        Command::Config(a) => commands::cmd_config(a.out.as_deref(), &cfg, out),
    })
}
