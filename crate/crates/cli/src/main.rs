use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gpgh::Execution;
use gpgh_cli::config::parse_override;
use gpgh_cli::{listing, run, CliError, RunRequest};

#[derive(Parser)]
#[command(name = "gpgh", version, about = "Run the geometric-harmonics / GP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV tables and manifest.json.
    Run {
        #[arg(long)]
        experiment: String,
        /// Flat key = value file; [experiment] sections apply to one experiment.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Parameter override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Run every batched loop on the calling thread.
        #[arg(long)]
        sequential: bool,
    },
    /// List experiments and their parameters.
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            print!("{}", listing());
            ExitCode::SUCCESS
        }
        Command::Run {
            experiment,
            config,
            seed,
            out,
            set,
            sequential,
        } => {
            let result = set
                .iter()
                .map(|s| parse_override(s).map_err(CliError::from))
                .collect::<Result<Vec<_>, _>>()
                .and_then(|overrides| {
                    run(&RunRequest {
                        experiment,
                        config,
                        overrides,
                        seed,
                        out: out.clone(),
                        exec: if sequential {
                            Execution::Sequential
                        } else {
                            Execution::default()
                        },
                    })
                });
            match result {
                Ok(_) => {
                    println!("wrote {}", out.join(gpgh_cli::MANIFEST).display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("gpgh: {e}");
                    ExitCode::from(e.exit_code())
                }
            }
        }
    }
}
