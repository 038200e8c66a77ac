use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ttacil_cli::config::parse_config;
use ttacil_cli::plot::{curves, render_svg};
use ttacil_cli::report::{build_table, Format, TableKind};
use ttacil_cli::runner::{read_records, run_experiment, workers_from_env, RunOptions};
use ttacil_cli::CliError;

/// Test-time adaptation for class-incremental learning: experiments and reports.
#[derive(Parser)]
#[command(name = "ttacil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (ordering, seed, condition, method) of an experiment file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds overriding the file's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Results file overriding the file's output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip runs whose id is already in the results file.
        #[arg(long)]
        skip_existing: bool,
    },
    /// Print a table from a results file.
    Report {
        #[arg(long)]
        table: String,
        #[arg(long = "in")]
        input: PathBuf,
        /// text or csv
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Write accuracy-versus-task curves as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seeds, out, skip_existing } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.output = out;
            }
            cfg.validate()?;
            let opts = RunOptions { skip_existing, workers: workers_from_env()? };
            let summary = run_experiment(&cfg, opts)?;
            eprintln!(
                "wrote {} records to {} ({} already present)",
                summary.written,
                summary.output.display(),
                summary.skipped
            );
        }
        Command::Report { table, input, format } => {
            let kind: TableKind = table.parse()?;
            let format: Format = format.parse()?;
            let records = read_records(&input)?;
            let table = build_table(kind, &records);
            print!("{}", table.render(format));
            for gap in &table.gaps {
                eprintln!("warning: no results for {gap}");
            }
        }
        Command::Plot { input, out } => {
            let records = read_records(&input)?;
            std::fs::write(&out, render_svg(&curves(&records)))
                .map_err(CliError::io(format!("writing {}", out.display())))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
