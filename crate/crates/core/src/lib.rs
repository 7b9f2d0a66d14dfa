//! Linear mixed models for rating data.
//!
//! Fits `y = Xτ + Zu + ε` with categorical fixed and random factors by
//! restricted (or full) maximum likelihood, then compares, evaluates and
//! ranks fitted models. The numeric core is generic over [`Real`] (`f32`,
//! `f64`); the aliases below fix it to `f64`.

pub mod design;
pub mod eval;
pub mod formula;
pub mod ingest;
pub mod linalg;
pub mod recommend;
pub mod reml;
pub mod scalar;
pub mod stats;

pub use design::{build_design, ColumnTerm, DesignError, DesignMatrices, Factor, ObservationTable};
pub use eval::{cross_validate, mae, split_train_test, CvOptions, EvalError, EvalReport};
pub use formula::{format_formula, parse_formula, FormulaError, ModelFormula};
pub use ingest::{load_movielens, IngestError, MovieLens, Selector};
pub use recommend::{
    coefficient_report, rank_groups_for_item, rank_items_for_group, CoefficientReport, GroupCell, RankedCell,
    RecommendError,
};
pub use reml::{
    estimate_covariance, fit, fit_ml, fit_reml, predict, Criterion, FitOptions, FitResult, RemlError,
    VarianceComponents,
};
pub use scalar::Real;
pub use stats::{
    information_criteria, likelihood_ratio_test, test_report, wald_test, LrtReport, StatsError, TestReport, WaldTest,
};

pub type Fit = FitResult<f64>;
pub type Table = ObservationTable<f64>;
pub type Design = DesignMatrices<f64>;
pub type Matrix = linalg::DenseMatrix<f64>;

/// Any error raised by the library, tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("formula: {0}")]
    Formula(#[from] FormulaError),
    #[error("design: {0}")]
    Design(#[from] DesignError),
    #[error("fit: {0}")]
    Reml(#[from] RemlError),
    #[error("stats: {0}")]
    Stats(#[from] StatsError),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("eval: {0}")]
    Eval(#[from] EvalError),
    #[error("recommend: {0}")]
    Recommend(#[from] RecommendError),
}
