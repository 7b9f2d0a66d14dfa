//! Model comparison: Wald tests on fixed factors, information criteria and
//! likelihood-ratio tests between nested models.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::design::ColumnTerm;
use crate::linalg::{independent_columns, Cholesky, DenseMatrix};
use crate::reml::{Criterion, FitResult, RemlError};
use crate::scalar::Real;

/// Negative likelihood-ratio statistics down to this are treated as
/// optimizer noise and clamped to zero.
pub const LRT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("`{0}` is not a fixed factor of the model")]
    NotFixed(String),
    #[error("factor `{0}` has no testable contrast")]
    NoContrast(String),
    #[error("contrast covariance for `{0}` is singular")]
    SingularContrast(String),
    #[error("models are not nested: {0}")]
    NotNested(String),
    #[error("models were fitted to different data")]
    DifferentData,
    #[error("likelihood ratio statistic {0} is negative beyond optimizer tolerance")]
    NegativeStatistic(f64),
    #[error(transparent)]
    Fit(#[from] RemlError),
}

/// Upper tail `P(χ²_df > x)`.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(df).expect("positive degrees of freedom").sf(x)
}

pub fn aic(loglik: f64, n_params: usize) -> f64 {
    -2.0 * loglik + 2.0 * n_params as f64
}

pub fn bic(loglik: f64, n_params: usize, n_obs: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (n_obs as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic: f64,
    pub loglik: f64,
}

pub fn information_criteria<T: Real>(fit: &FitResult<T>) -> InformationCriteria {
    let loglik = fit.loglik.as_f64();
    InformationCriteria { aic: aic(loglik, fit.n_params()), bic: bic(loglik, fit.n_params(), fit.n_obs), loglik }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Wald chi-square test that all levels of a fixed factor share one
/// coefficient, using successive differences between supported levels.
/// Levels whose column was aliased enter with coefficient 0.
pub fn wald_test<T: Real>(fit: &FitResult<T>, factor: &str) -> Result<WaldTest, StatsError> {
    if !fit.formula.is_fixed(factor) {
        return Err(StatsError::NotFixed(factor.to_string()));
    }
    let support = fit.level_support(factor).expect("fixed factor has support counts");
    let kept_pos = |level: usize| {
        fit.fixed.iter().position(
            |fe| matches!(&fe.term, ColumnTerm::Level { factor: f, level: l, .. } if f == factor && *l == level),
        )
    };
    // Supported levels in level order, each mapped to its τ̂ position (None = aliased, fixed at 0).
    let levels: Vec<Option<usize>> = (0..support.len()).filter(|&l| support[l] > 0).map(kept_pos).collect();
    let p = fit.fixed.len();
    let mut contrasts: Vec<Vec<f64>> = Vec::new();
    for pair in levels.windows(2) {
        let mut row = vec![0.0; p];
        if let Some(a) = pair[1] {
            row[a] += 1.0;
        }
        if let Some(b) = pair[0] {
            row[b] -= 1.0;
        }
        if row.iter().any(|&v| v != 0.0) {
            contrasts.push(row);
        }
    }
    if contrasts.is_empty() {
        return Err(StatsError::NoContrast(factor.to_string()));
    }

    let l = DenseMatrix::from_rows(&contrasts);
    let cov = fit.fixed_covariance();
    let cov64 =
        DenseMatrix::from_rows(&(0..p).map(|i| (0..p).map(|j| cov[(i, j)].as_f64()).collect()).collect::<Vec<_>>());
    let tau: Vec<f64> = fit.fixed.iter().map(|f| f.estimate.as_f64()).collect();
    let m = l.matmul(&cov64).matmul(&l.transpose());

    // Keep a linearly independent subset of contrasts.
    let keep = independent_columns(&m, 1e-10);
    if keep.is_empty() {
        return Err(StatsError::SingularContrast(factor.to_string()));
    }
    let lt = l.mul_vec(&tau);
    let sub =
        DenseMatrix::from_rows(&keep.iter().map(|&i| keep.iter().map(|&j| m[(i, j)]).collect()).collect::<Vec<_>>());
    let chol = Cholesky::factor(&sub).map_err(|_| StatsError::SingularContrast(factor.to_string()))?;
    let v: Vec<f64> = keep.iter().map(|&i| lt[i]).collect();
    let w = chol.forward(&v);
    let statistic = w.iter().map(|x| x * x).sum::<f64>();
    let df = keep.len();
    Ok(WaldTest { statistic, df, p_value: chi_square_sf(statistic, df as f64) })
}

/// One row of a model-comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub model_label: String,
    /// Wald p-value of the model's first fixed factor, if it has a testable one.
    pub p_value: Option<f64>,
    pub aic: f64,
    pub bic: f64,
    pub loglik: f64,
    pub df: usize,
}

pub fn test_report<T: Real>(fit: &FitResult<T>, label: impl Into<String>) -> TestReport {
    let ic = information_criteria(fit);
    let p_value = fit.formula.fixed_factors().first().and_then(|f| wald_test(fit, f).ok()).map(|w| w.p_value);
    TestReport { model_label: label.into(), p_value, aic: ic.aic, bic: ic.bic, loglik: ic.loglik, df: fit.n_params() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrtReport {
    pub df_nested: usize,
    pub df_full: usize,
    pub loglik_nested: f64,
    pub loglik_full: f64,
    pub lr_stat: f64,
    pub delta_df: usize,
    pub p_value: f64,
}

/// Checks that `nested` is a sub-model of `full`: same response, every fixed
/// factor of `nested` is fixed in `full`, every random factor of `nested`
/// appears in `full` (as random, or fixed, which is its unshrunk limit), and
/// the two formulas differ.
pub fn check_nested<T: Real>(nested: &FitResult<T>, full: &FitResult<T>) -> Result<(), StatsError> {
    let (a, b) = (&nested.formula, &full.formula);
    if a.response() != b.response() {
        return Err(StatsError::NotNested("responses differ".into()));
    }
    if let Some(f) = a.fixed_factors().iter().find(|f| !b.is_fixed(f)) {
        return Err(StatsError::NotNested(format!("fixed factor `{f}` is not fixed in the larger model")));
    }
    if let Some(f) = a.random_factors().iter().find(|f| !(b.is_random(f) || b.is_fixed(f))) {
        return Err(StatsError::NotNested(format!("random factor `{f}` is missing from the larger model")));
    }
    if a == b {
        return Err(StatsError::NotNested("the two formulas are identical".into()));
    }
    Ok(())
}

/// Likelihood-ratio test of `nested` against `full`. REML fits are refitted
/// by maximum likelihood first, since restricted likelihoods with different
/// fixed effects are not comparable.
pub fn likelihood_ratio_test<T: Real>(nested: &FitResult<T>, full: &FitResult<T>) -> Result<LrtReport, StatsError> {
    if nested.n_obs != full.n_obs || nested.data_checksum() != full.data_checksum() {
        return Err(StatsError::DifferentData);
    }
    check_nested(nested, full)?;
    let ml = |f: &FitResult<T>| -> Result<FitResult<T>, StatsError> {
        Ok(match f.criterion {
            Criterion::Ml => f.clone(),
            Criterion::Reml => f.refit(Criterion::Ml)?,
        })
    };
    let (small, large) = (ml(nested)?, ml(full)?);
    let (df_nested, df_full) = (small.n_params(), large.n_params());
    let (ln, lf) = (small.loglik.as_f64(), large.loglik.as_f64());
    let raw = 2.0 * (lf - ln);
    if raw < -LRT_CLAMP {
        return Err(StatsError::NegativeStatistic(raw));
    }
    if df_full <= df_nested {
        return Err(StatsError::NotNested(format!("larger model has {df_full} parameters, nested model {df_nested}")));
    }
    let lr_stat = raw.max(0.0);
    let delta_df = df_full - df_nested;
    Ok(LrtReport {
        df_nested,
        df_full,
        loglik_nested: ln,
        loglik_full: lf,
        lr_stat,
        delta_df,
        p_value: chi_square_sf(lr_stat, delta_df as f64),
    })
}
