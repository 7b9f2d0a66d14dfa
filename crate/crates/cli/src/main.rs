//! `lmmrec` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical or
//! convergence error.

mod args;
mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use lmmrec::{DesignError, Error, EvalError, RecommendError, RemlError, StatsError};

use args::{Cli, Command};
use commands::{EvaluateArgs, RecommendArgs};
use output::Sink;

/// Bad flags, config entries or option values.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Output was written, but the listed fits hit the iteration limit.
#[derive(Debug)]
pub struct NotConverged(pub String);

impl fmt::Display for NotConverged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fit: did not converge: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

/// Wraps a library error so its message names the module that raised it.
pub trait Tagged<T> {
    fn tagged(self) -> Result<T, Error>;
}

impl<T, E: Into<Error>> Tagged<T> for Result<T, E> {
    fn tagged(self) -> Result<T, Error> {
        self.map_err(Into::into)
    }
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

fn design_code(e: &DesignError) -> u8 {
    match e {
        DesignError::UnknownFactor(_) | DesignError::UnknownLevel { .. } => USAGE,
        _ => DATA,
    }
}

fn reml_code(e: &RemlError) -> u8 {
    match e {
        RemlError::Design(d) => design_code(d),
        RemlError::Degenerate { .. } => DATA,
        _ => NUMERICAL,
    }
}

fn library_code(e: &Error) -> u8 {
    match e {
        Error::Formula(_) => USAGE,
        Error::Design(d) => design_code(d),
        Error::Reml(r) => reml_code(r),
        Error::Stats(s) => match s {
            StatsError::NotFixed(_) | StatsError::NotNested(_) | StatsError::DifferentData => USAGE,
            StatsError::Fit(r) => reml_code(r),
            _ => NUMERICAL,
        },
        Error::Ingest(_) => DATA,
        Error::Eval(v) => match v {
            EvalError::BadFraction(_) | EvalError::NoRepeats => USAGE,
            EvalError::Fit { source, .. } => reml_code(source),
            EvalError::Design(d) => design_code(d),
            _ => DATA,
        },
        Error::Recommend(r) => match r {
            RecommendError::NoFits => DATA,
            RecommendError::Design(d) => design_code(d),
            _ => USAGE,
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<NotConverged>() {
            return NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return library_code(e);
        }
        if cause.is::<std::io::Error>() {
            return DATA;
        }
    }
    USAGE
}

/// `a: b: c`, skipping causes already quoted by the message above them.
fn render(err: &anyhow::Error) -> String {
    let mut out: Vec<String> = Vec::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if out.last().is_some_and(|prev| prev.ends_with(&msg)) {
            continue;
        }
        out.push(msg);
    }
    out.join(": ")
}

fn with_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config::config_path(&argv) else { return Ok(argv) };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| UsageError(format!("cannot read config file {}: {e}", path.display())))?;
    let entries = config::parse(&text)?;
    Ok(config::apply(&Cli::command(), argv, &entries, &path)?)
}

fn run(cli: Cli) -> Result<()> {
    let sink = Sink { format: cli.format, full_precision: cli.full_precision, out: cli.out.as_deref() };
    let ml = commands::load(cli.data.as_deref())?;
    let (table, status) = match &cli.command {
        Command::Fit { select, formula, fit } => commands::cmd_fit(&ml, select, formula, fit)?,
        Command::Compare { select, nested, full, fit } => commands::cmd_compare(&ml, select, nested, full, fit)?,
        Command::Criteria { select, formulas, fit } => commands::cmd_criteria(&ml, select, formulas, fit)?,
        Command::Evaluate {
            select,
            all_genres,
            min_ratings,
            formula,
            repeats,
            train_fraction,
            seed,
            clip,
            per_repeat,
            fit,
        } => {
            let a = EvaluateArgs {
                select,
                all_genres: *all_genres,
                min_ratings: *min_ratings,
                formula,
                repeats: *repeats,
                train_fraction: *train_fraction,
                seed: *seed,
                clip: *clip,
                per_repeat: *per_repeat,
                fit,
            };
            (commands::cmd_evaluate(&ml, &a)?, Ok(()))
        }
        Command::Recommend { select, by, for_group, top, formula, min_ratings, fit } => {
            let a = RecommendArgs {
                select,
                by: by.as_deref(),
                for_group: for_group.as_deref(),
                top: *top,
                formula,
                min_ratings: *min_ratings,
                fit,
            };
            commands::cmd_recommend(&ml, &a)?
        }
        Command::Coefficients { select, formula, factor, fit } => {
            commands::cmd_coefficients(&ml, select, formula, factor, fit)?
        }
        Command::Ingest { select } => (commands::cmd_ingest(&ml, select)?, Ok(())),
    };
    sink.emit(&table).context("output")?;
    status
}

fn main() -> ExitCode {
    let fail = |err: anyhow::Error| {
        eprintln!("error: {}", render(&err));
        ExitCode::from(exit_code(&err))
    };
    let argv = match with_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
