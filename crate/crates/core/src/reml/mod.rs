//! Variance-component estimation and BLUE/BLUP for `y = Xτ + Zu + ε`.
//!
//! Random effects are independent random intercepts, `var(u_k) = σ²γ_k I`,
//! and the residual covariance is `σ² I`. The residual variance σ² is
//! profiled out, so optimization runs over the ratios γ_k only.

mod mme;
mod optimize;

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::design::{build_design, ColumnTerm, DesignError, DesignMatrices, ObservationTable};
use crate::formula::ModelFormula;
use crate::linalg::{Cholesky, DenseMatrix};
use crate::scalar::Real;

pub use mme::{assemble_mme, solve_mme, CrossProducts, MixedModelEquations, MmeSolution};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemlError {
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("variance ratio for `{factor}` is {value}; the mixed model equations need every ratio > 0")]
    ZeroVarianceRatio { factor: String, value: f64 },
    #[error("coefficient matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("{n_obs} observations cannot support {n_fixed} fixed-effect columns")]
    Degenerate { n_obs: usize, n_fixed: usize },
    #[error("expected {want} variance ratios, got {got}")]
    GammaLength { want: usize, got: usize },
    #[error("variance ratios must be finite and non-negative, got {0}")]
    InvalidGamma(f64),
}

/// Which likelihood the variance components maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    /// Restricted likelihood, σ̂² divisor `N − p`.
    Reml,
    /// Full likelihood, σ̂² divisor `N`.
    Ml,
}

/// Residual variance and the per-factor variance ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents<T> {
    pub sigma2: T,
    pub gamma: Vec<T>,
}

impl<T: Real> VarianceComponents<T> {
    /// Variance of each random factor, `σ²γ_k`.
    pub fn random_variances(&self) -> Vec<T> {
        self.gamma.iter().map(|&g| g * self.sigma2).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when the last step changed ℓ by less than this...
    pub tol_loglik: f64,
    /// ...and every log-ratio gradient entry is below this.
    pub tol_gradient: f64,
    pub initial_gamma: f64,
    /// Ratios below this are treated as zero.
    pub boundary_gamma: f64,
    /// Finish with Newton steps on a finite-difference Hessian.
    pub polish: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_loglik: 1e-8,
            tol_gradient: 1e-6,
            initial_gamma: 1.0,
            boundary_gamma: 1e-8,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedEffect<T> {
    pub term: ColumnTerm,
    pub estimate: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects<T> {
    pub factor: String,
    pub levels: Vec<String>,
    /// BLUPs, one per level.
    pub estimates: Vec<T>,
}

/// Everything a fitted model exposes.
#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub formula: ModelFormula,
    pub criterion: Criterion,
    /// τ̂ over the kept fixed-effect columns.
    pub fixed: Vec<FixedEffect<T>>,
    /// Fixed-effect columns removed as aliased (including unobserved levels).
    pub dropped: Vec<ColumnTerm>,
    pub random: Vec<RandomEffects<T>>,
    pub theta: VarianceComponents<T>,
    /// Maximized log-likelihood under `criterion`.
    pub loglik: T,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub options: FitOptions,
    covariance: CovarianceFactor<T>,
    level_support: HashMap<String, Vec<usize>>,
    training: Arc<ObservationTable<T>>,
    checksum: u64,
}

#[derive(Debug, Clone)]
struct CovarianceFactor<T> {
    chol: Cholesky<T>,
    scales: Vec<T>,
}

impl<T: Real> FitResult<T> {
    pub fn loglik_restricted(&self) -> Option<T> {
        (self.criterion == Criterion::Reml).then_some(self.loglik)
    }

    /// Parameters counted by AIC/BIC: kept fixed columns, non-zero variance
    /// ratios and the residual variance.
    pub fn n_params(&self) -> usize {
        self.fixed.len() + self.theta.gamma.iter().filter(|&&g| g > T::zero()).count() + 1
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    pub fn n_random(&self) -> usize {
        self.random.iter().map(|r| r.levels.len()).sum()
    }

    pub fn training(&self) -> &Arc<ObservationTable<T>> {
        &self.training
    }

    /// Fingerprint of the training data, used to check two fits share it.
    pub fn data_checksum(&self) -> u64 {
        self.checksum
    }

    pub fn gamma_for(&self, factor: &str) -> Option<T> {
        self.random.iter().position(|r| r.factor == factor).map(|k| self.theta.gamma[k])
    }

    /// Training row count per level of a fixed factor.
    pub fn level_support(&self, factor: &str) -> Option<&[usize]> {
        self.level_support.get(factor).map(Vec::as_slice)
    }

    /// Standard errors of τ̂ from the diagonal of σ̂²C⁻¹.
    pub fn fixed_standard_errors(&self) -> Vec<T> {
        (0..self.fixed.len())
            .map(|i| (self.theta.sigma2 * self.covariance.chol.inverse_diagonal_entry(i)).sqrt())
            .collect()
    }

    /// `var(τ̂)`, the fixed block of σ̂²C⁻¹.
    pub fn fixed_covariance(&self) -> DenseMatrix<T> {
        let full = estimate_covariance(self);
        let p = self.fixed.len();
        let mut out = DenseMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                out[(i, j)] = full[(i, j)];
            }
        }
        out
    }

    /// Refits the same formula on the same data under another criterion.
    pub fn refit(&self, criterion: Criterion) -> Result<FitResult<T>, RemlError> {
        fit_shared(&self.formula, Arc::clone(&self.training), criterion, &self.options)
    }

    /// Per-level contributions of every modeled factor, indexed by the level
    /// labels of `factor_levels`. Labels the fit never saw get the
    /// population-level value: 0 for random factors, the support-weighted
    /// mean coefficient for fixed factors.
    pub(crate) fn contributions(&self, factor: &str, labels: &[String]) -> Option<Vec<T>> {
        if let Some(r) = self.random.iter().find(|r| r.factor == factor) {
            let lookup: HashMap<&str, T> =
                r.levels.iter().map(String::as_str).zip(r.estimates.iter().copied()).collect();
            return Some(labels.iter().map(|l| lookup.get(l.as_str()).copied().unwrap_or(T::zero())).collect());
        }
        if !self.formula.is_fixed(factor) {
            return None;
        }
        let lookup = self.fixed_level_values(factor);
        let population = self.population_fixed(factor);
        Some(labels.iter().map(|l| lookup.get(l.as_str()).copied().unwrap_or(population)).collect())
    }

    /// Values of a fixed factor's supported levels (0 for aliased ones).
    fn fixed_level_values(&self, factor: &str) -> HashMap<&str, T> {
        let support = &self.level_support[factor];
        let mut out = HashMap::new();
        for term in self.dropped.iter() {
            if let ColumnTerm::Level { factor: f, level, label } = term {
                if f == factor && support[*level] > 0 {
                    out.insert(label.as_str(), T::zero());
                }
            }
        }
        for fe in &self.fixed {
            if let ColumnTerm::Level { factor: f, label, .. } = &fe.term {
                if f == factor {
                    out.insert(label.as_str(), fe.estimate);
                }
            }
        }
        out
    }

    /// Training-weighted mean effect of a fixed factor.
    pub(crate) fn population_fixed(&self, factor: &str) -> T {
        let support = &self.level_support[factor];
        let levels = &self.training.factor(factor).expect("fixed factor in training table").levels;
        let values = self.fixed_level_values(factor);
        let mut num = T::zero();
        let mut den = T::zero();
        for (label, &n) in levels.iter().zip(support) {
            if let Some(&v) = values.get(label.as_str()) {
                let w = T::from_usize(n).unwrap();
                num = num + w * v;
                den = den + w;
            }
        }
        if den > T::zero() {
            num / den
        } else {
            T::zero()
        }
    }

    pub fn intercept(&self) -> T {
        self.fixed.iter().find(|f| f.term == ColumnTerm::Intercept).map_or(T::zero(), |f| f.estimate)
    }

    /// Prediction for a combination of factor levels given by label; `None`
    /// (or an omitted factor) means unspecified, i.e. population level.
    pub fn predict_cell(&self, cell: &[(&str, Option<&str>)]) -> Result<T, DesignError> {
        for (name, _) in cell {
            if !self.formula.factors().any(|f| f == *name) {
                return Err(DesignError::UnknownFactor(name.to_string()));
            }
        }
        let mut total = self.intercept();
        for factor in self.formula.factors() {
            let chosen = cell.iter().find(|(n, _)| *n == factor).and_then(|(_, l)| *l);
            total = total
                + match chosen {
                    Some(label) => self.contributions(factor, &[label.to_string()]).unwrap()[0],
                    None if self.formula.is_fixed(factor) => self.population_fixed(factor),
                    None => T::zero(),
                };
        }
        Ok(total)
    }
}

/// Restricted log-likelihood and profiled σ̂² at the variance ratios `gamma`:
/// `ℓ_R = −½[(N−p)(log(2πσ̂²) + 1) + log|V| + log|XᵀV⁻¹X|]`, `σ̂² = yᵀPy/(N−p)`.
pub fn reml_loglik<T: Real>(design: &DesignMatrices<T>, gamma: &[T]) -> Result<(T, T), RemlError> {
    let ev = CrossProducts::new(design).evaluate(gamma, Criterion::Reml, false)?;
    Ok((ev.loglik, ev.sigma2))
}

/// Profiled full log-likelihood `−½[N(log(2πσ̂²) + 1) + log|V|]`, `σ̂² = yᵀPy/N`.
pub fn ml_loglik<T: Real>(design: &DesignMatrices<T>, gamma: &[T]) -> Result<(T, T), RemlError> {
    let ev = CrossProducts::new(design).evaluate(gamma, Criterion::Ml, false)?;
    Ok((ev.loglik, ev.sigma2))
}

/// Analytic gradient of the profiled log-likelihood with respect to
/// `ρ_k = log γ_k`. Entries for γ_k = 0 are zero.
pub fn loglik_gradient<T: Real>(
    design: &DesignMatrices<T>,
    gamma: &[T],
    criterion: Criterion,
) -> Result<Vec<T>, RemlError> {
    let ev = CrossProducts::new(design).evaluate(gamma, criterion, true)?;
    Ok(ev.gradient.unwrap())
}

pub fn fit_reml<T: Real>(
    formula: &ModelFormula,
    table: &ObservationTable<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>, RemlError> {
    fit(formula, table, Criterion::Reml, opts)
}

pub fn fit_ml<T: Real>(
    formula: &ModelFormula,
    table: &ObservationTable<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>, RemlError> {
    fit(formula, table, Criterion::Ml, opts)
}

pub fn fit<T: Real>(
    formula: &ModelFormula,
    table: &ObservationTable<T>,
    criterion: Criterion,
    opts: &FitOptions,
) -> Result<FitResult<T>, RemlError> {
    fit_shared(formula, Arc::new(table.clone()), criterion, opts)
}

/// Like [`fit`], sharing an already reference-counted table.
pub fn fit_shared<T: Real>(
    formula: &ModelFormula,
    table: Arc<ObservationTable<T>>,
    criterion: Criterion,
    opts: &FitOptions,
) -> Result<FitResult<T>, RemlError> {
    let design = build_design(formula, &table)?;
    let cross = CrossProducts::new(&design);
    let outcome = optimize::maximize(&cross, criterion, opts)?;
    let ev = cross.evaluate(&outcome.gamma, criterion, false)?;
    let p = cross.n_fixed();
    let (tau, u) = ev.system.estimates(p);

    let fixed = design
        .kept_columns
        .iter()
        .zip(tau)
        .map(|(&c, estimate)| FixedEffect { term: design.x_terms[c].clone(), estimate })
        .collect();
    let dropped = design.dropped_columns().into_iter().map(|c| design.x_terms[c].clone()).collect();
    let mut offset = 0;
    let random = design
        .z_blocks
        .iter()
        .map(|b| {
            let estimates = u[offset..offset + b.levels.len()].to_vec();
            offset += b.levels.len();
            RandomEffects { factor: b.factor.clone(), levels: b.levels.clone(), estimates }
        })
        .collect();

    let mut level_support = HashMap::new();
    for name in formula.fixed_factors() {
        let fi = table.factor_index(name)?;
        let mut counts = vec![0usize; table.factors()[fi].levels.len()];
        for i in 0..table.n_rows() {
            counts[table.code(i, fi)] += 1;
        }
        level_support.insert(name.clone(), counts);
    }

    Ok(FitResult {
        formula: formula.clone(),
        criterion,
        fixed,
        dropped,
        random,
        theta: VarianceComponents { sigma2: ev.sigma2, gamma: outcome.gamma },
        loglik: ev.loglik,
        n_obs: design.n_obs(),
        converged: outcome.converged,
        iterations: outcome.iterations,
        options: opts.clone(),
        covariance: CovarianceFactor { chol: ev.system.chol, scales: ev.system.scales },
        level_support,
        checksum: table.checksum(),
        training: table,
    })
}

/// `σ̂² C⁻¹`, the joint covariance of `(τ̂, û − u)`, ordered as the kept fixed
/// columns followed by the random levels. Components on the boundary
/// (γ_k = 0) get zero rows and columns.
pub fn estimate_covariance<T: Real>(fit: &FitResult<T>) -> DenseMatrix<T> {
    let inv = fit.covariance.chol.inverse();
    let s = &fit.covariance.scales;
    let n = s.len();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = fit.theta.sigma2 * s[i] * inv[(i, j)] * s[j];
        }
    }
    out
}

/// `X_new τ̂ + Z_new û` for each row of `newdata`, matched to the fit by
/// factor name and level label. Unseen random levels contribute 0; fixed
/// levels without training support contribute the population mean effect.
pub fn predict<T: Real>(fit: &FitResult<T>, newdata: &ObservationTable<T>) -> Result<Vec<T>, DesignError> {
    let mut per_factor = Vec::new();
    for factor in fit.formula.factors() {
        let fi = newdata.factor_index(factor)?;
        let contrib = fit
            .contributions(factor, &newdata.factors()[fi].levels)
            .ok_or_else(|| DesignError::UnknownFactor(factor.to_string()))?;
        per_factor.push((fi, contrib));
    }
    let base = fit.intercept();
    Ok((0..newdata.n_rows())
        .map(|i| per_factor.iter().fold(base, |acc, (fi, c)| acc + c[newdata.code(i, *fi)]))
        .collect())
}

#[cfg(test)]
mod tests;
