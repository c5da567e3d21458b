//! Batch front end for the `conebsde` library.
//!
//! [`run`] takes parsed arguments, executes one command and returns the
//! process exit code. Codes: 0 success, 1 I/O error, 2 invalid input,
//! 3 numerical failure, 4 failed verification.

pub mod commands;
pub mod config;
pub mod output;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{CliError, CommandOutput, Status};
use crate::config::{Check, RunConfig, Validated};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_VERIFY_FAIL: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "conebsde", version, about = "Matrix Riccati, BSDE and utility-maximization solver for affine models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration (schema "conebsde/1").
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; without it the summary goes to standard output.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub paths: Option<u64>,
    /// Riccati steps for solve commands, time steps for verify and simulate.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Worker threads for Monte Carlo (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Format of tabular artifacts.
    #[arg(long, global = true, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Solve the generalized Riccati equation and check the existence assumptions.
    RiccatiSolve,
    /// Value function and optimal strategy of a utility problem.
    Portfolio,
    /// Indifference price and hedge of the configured claim or numeraire change.
    Price,
    /// Run a verification check and report PASS or FAIL.
    Verify {
        #[arg(value_enum)]
        check: Option<CheckArg>,
    },
    /// Simulate and dump paths.
    Simulate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckArg {
    Transform,
    Martingale,
    DriftMatch,
}

impl From<CheckArg> for Check {
    fn from(c: CheckArg) -> Self {
        match c {
            CheckArg::Transform => Check::Transform,
            CheckArg::Martingale => Check::Martingale,
            CheckArg::DriftMatch => Check::DriftMatch,
        }
    }
}

/// Applies the command-line overrides to the configuration.
pub fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    if let Some(s) = cli.seed {
        cfg.monte_carlo.seed = s;
    }
    if let Some(p) = cli.paths {
        cfg.monte_carlo.paths = p;
    }
    if let Some(n) = cli.steps {
        match cli.command {
            Command::Verify { .. } | Command::Simulate => cfg.monte_carlo.steps = n,
            _ => cfg.solver.steps = n,
        }
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = Some(o.display().to_string());
    }
}

pub fn execute(command: Command, v: &Validated) -> Result<CommandOutput, CliError> {
    match command {
        Command::RiccatiSolve => commands::riccati_solve(v),
        Command::Portfolio => commands::portfolio(v),
        Command::Price => commands::price(v),
        Command::Verify { check } => commands::verify(v, check.map(Into::into)),
        Command::Simulate => commands::simulate(v),
    }
}

fn write_outputs(dir: &Path, cfg: &RunConfig, out: &CommandOutput, format: Format) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{}.json", out.summary_name)), output::to_json_string(&out.summary))?;
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    for (name, table) in &out.tables {
        match format {
            Format::Csv => std::fs::write(dir.join(format!("{name}.csv")), table.to_csv())?,
            Format::Json => std::fs::write(dir.join(format!("{name}.json")), output::to_json_string(&table.to_json()))?,
        }
    }
    Ok(())
}

/// Runs the parsed command line and returns the exit code. Diagnostics go
/// to `err`, results to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(path) = &cli.config else {
        let _ = writeln!(err, "error: --config is required");
        return EXIT_VALIDATION;
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
            return EXIT_IO;
        }
    };
    let mut cfg = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_VALIDATION;
        }
    };
    apply_overrides(&mut cfg, cli);
    let validated = match config::validate(&cfg) {
        Ok(v) => v,
        Err(errors) => {
            let _ = writeln!(err, "invalid configuration ({} problems):", errors.len());
            for e in errors {
                let _ = writeln!(err, "  {e}");
            }
            return EXIT_VALIDATION;
        }
    };
    for w in &validated.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let result = match execute(cli.command, &validated) {
        Ok(r) => r,
        Err(CliError::Validation(es)) => {
            for e in es {
                let _ = writeln!(err, "error: {e}");
            }
            return EXIT_VALIDATION;
        }
        Err(CliError::Numerical(e)) => {
            let _ = writeln!(err, "numerical failure: {e}");
            return EXIT_NUMERICAL;
        }
    };
    match &cfg.output.dir {
        Some(dir) => {
            if let Err(e) = write_outputs(Path::new(dir), &cfg, &result, cli.format) {
                let _ = writeln!(err, "error: cannot write to {dir}: {e}");
                return EXIT_IO;
            }
            let _ = out.write_all(result.report.as_bytes());
        }
        None => {
            let _ = out.write_all(output::to_json_string(&result.summary).as_bytes());
            let _ = err.write_all(result.report.as_bytes());
        }
    }
    match result.status {
        Status::Pass => EXIT_OK,
        Status::Numerical => EXIT_NUMERICAL,
        Status::VerificationFail => EXIT_VERIFY_FAIL,
    }
}
