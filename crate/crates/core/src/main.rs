use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairmvc::cli::{self, Config, ResultRow, RunSpec};

#[derive(Parser)]
#[command(
    name = "fairmvc",
    version,
    about = "Fairness-aware multi-view clustering experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over its seeds.
    Run(Common),
    /// Run a configuration over every value of the `axis` key.
    Sweep(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Path of the `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Result table path; overrides `out` in the config. Without either the
    /// table goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds` in the config.
    #[arg(long)]
    seeds: Option<String>,
}

impl Common {
    fn apply(&self, spec: &mut RunSpec) -> fairmvc::Result<()> {
        if let Some(out) = &self.out {
            spec.out = Some(out.clone());
        }
        if let Some(seeds) = &self.seeds {
            spec.seeds = cli::parse_list("seeds", seeds)?;
        }
        Ok(())
    }
}

fn execute(command: &Command) -> fairmvc::Result<(Vec<ResultRow>, bool)> {
    match command {
        Command::Run(c) => {
            let mut spec = Config::load(&c.config)?.run_spec()?;
            c.apply(&mut spec)?;
            Ok((cli::run(&spec)?, spec.out.is_some()))
        }
        Command::Sweep(c) => {
            let mut spec = Config::load(&c.config)?.sweep_spec()?;
            c.apply(&mut spec.run)?;
            Ok((cli::sweep(&spec)?, spec.run.out.is_some()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let result = execute(&args.command).and_then(|(rows, written)| {
        if written {
            Ok(())
        } else {
            cli::write_table(io::stdout().lock(), &rows)
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
