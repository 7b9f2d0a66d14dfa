use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmmrec::{Criterion, FitOptions, Selector};

use crate::output::Format;

/// Formula used by `recommend` when none is given.
pub const DEFAULT_RECOMMEND_FORMULA: &str = "y ~ -1 + occupation + (1|age) + (1|gender)";

#[derive(Debug, Parser)]
#[command(name = "lmmrec", version, about = "Linear mixed models for demographic group recommendation")]
pub struct Cli {
    /// MovieLens-1M directory holding users.dat, movies.dat and ratings.dat.
    #[arg(long, global = true, env = "LMMREC_DATA", value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// key=value file supplying any flag not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write to this file instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Print CSV numbers at full precision instead of 6 significant digits.
    #[arg(long, global = true)]
    pub full_precision: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and print estimates, variance components and fit statistics.
    Fit {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long)]
        formula: String,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Likelihood-ratio comparison of a nested model against a larger one.
    Compare {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long)]
        nested: String,
        #[arg(long)]
        full: String,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Wald p-value, AIC, BIC and log-likelihood for several models.
    Criteria {
        #[command(flatten)]
        select: SelectArgs,
        /// Repeat for each model.
        #[arg(long = "formula", required = true)]
        formulas: Vec<String>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Repeated random hold-out MAE against the global-mean baseline.
    Evaluate {
        #[command(flatten)]
        select: SelectArgs,
        /// Evaluate every genre bucket (rows in genre-name order).
        #[arg(long, conflicts_with_all = ["movie", "movie_id", "genre"])]
        all_genres: bool,
        /// With --all-genres, skip genres with fewer ratings.
        #[arg(long, default_value_t = 0)]
        min_ratings: usize,
        #[arg(long)]
        formula: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Clip predictions to the 1–5 rating scale.
        #[arg(long)]
        clip: bool,
        /// One row per repeat instead of one per item.
        #[arg(long)]
        per_repeat: bool,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Rank demographic groups for an item (--by) or genres for a group (--for).
    Recommend {
        #[command(flatten)]
        select: SelectArgs,
        /// Comma-separated factors to rank combinations of, e.g. `occupation` or `age,gender`.
        #[arg(long, conflicts_with = "for_group")]
        by: Option<String>,
        /// Group as `factor=level` pairs, e.g. `age=25,gender=M`; levels may be labels or file codes.
        #[arg(long = "for", value_name = "GROUP")]
        for_group: Option<String>,
        /// Number of rows to keep (default: all groups for --by, 5 genres for --for).
        #[arg(long)]
        top: Option<usize>,
        #[arg(long, default_value = DEFAULT_RECOMMEND_FORMULA)]
        formula: String,
        /// With --for, skip genres with fewer ratings.
        #[arg(long, default_value_t = 0)]
        min_ratings: usize,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Fixed-effect estimates of one factor with standard errors (plot data).
    Coefficients {
        #[command(flatten)]
        select: SelectArgs,
        #[arg(long)]
        formula: String,
        /// Fixed factor to report, or `intercept`.
        #[arg(long)]
        factor: String,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Dataset counts, or with a selector the observation table as CSV/JSON.
    Ingest {
        #[command(flatten)]
        select: SelectArgs,
    },
}

#[derive(Debug, Clone, Args)]
#[group(multiple = false)]
pub struct SelectArgs {
    /// Exact movie title including the year, e.g. "Jurassic Park (1993)".
    #[arg(long, value_name = "TITLE")]
    pub movie: Option<String>,
    #[arg(long, value_name = "ID")]
    pub movie_id: Option<u32>,
    #[arg(long)]
    pub genre: Option<String>,
}

impl SelectArgs {
    pub fn selector(&self) -> Option<Selector> {
        match (&self.movie, self.movie_id, &self.genre) {
            (Some(t), _, _) => Some(Selector::Title(t.clone())),
            (_, Some(id), _) => Some(Selector::MovieId(id)),
            (_, _, Some(g)) => Some(Selector::Genre(g.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Reml,
    Ml,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long, value_enum, default_value_t = CriterionArg::Reml)]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_loglik: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol_gradient: f64,
    #[arg(long, default_value_t = 1.0)]
    pub initial_gamma: f64,
}

impl FitArgs {
    pub fn criterion(&self) -> Criterion {
        match self.criterion {
            CriterionArg::Reml => Criterion::Reml,
            CriterionArg::Ml => Criterion::Ml,
        }
    }

    pub fn options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            tol_loglik: self.tol_loglik,
            tol_gradient: self.tol_gradient,
            initial_gamma: self.initial_gamma,
            ..FitOptions::default()
        }
    }
}
