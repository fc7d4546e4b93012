//! `porohom` command-line driver.
//!
//! Exit codes: 0 success, 1 numerical failure (including failed coefficient
//! validations or a failed comparison), 2 configuration or constraint error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use porohom::pipeline::{cmd_cell, cmd_compare, cmd_compare_runs, cmd_regime, cmd_run, Overrides, RunConfig};
use porohom::Error;

#[derive(Parser)]
#[command(name = "porohom", version, about = "Periodic homogenization of poroelastic and acoustic media")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent cell problems and sweep members.
    #[arg(long)]
    workers: Option<usize>,
    /// Linear solver and fixed-point tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Classify the regime and list the required cell problems.
    Regime(Common),
    /// Solve the cell problems and write the coefficients file.
    Cell(Common),
    /// Run the homogenized model and write time series.
    Run(Common),
    /// Compare fine-scale runs (or another run directory) with the macro run.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Compare against the macro run stored in this directory instead.
        #[arg(long)]
        against: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        output_dir: c.out.clone(),
        tol: c.tol,
    })?;
    Ok(cfg)
}

fn execute(cmd: &Command) -> Result<bool, Error> {
    match cmd {
        Command::Regime(c) => {
            let r = cmd_regime(&load(c)?)?;
            print!("{}", r.render());
            Ok(true)
        }
        Command::Cell(c) => {
            let out = cmd_cell(&load(c)?, c.workers)?;
            print!("{}", out.render());
            Ok(out.all_valid)
        }
        Command::Run(c) => {
            let out = cmd_run(&load(c)?)?;
            println!(
                "{} steps, max Picard iterations {} -> {}",
                out.steps,
                out.max_picard_iterations,
                out.csv_path.display()
            );
            Ok(true)
        }
        Command::Compare { common, against } => {
            let cfg = load(common)?;
            let r = match against {
                Some(dir) => cmd_compare_runs(&cfg, dir)?,
                None => cmd_compare(&cfg, common.workers)?,
            };
            print!("{}", r.render());
            Ok(r.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
