//! Group-level recommendations from fitted models: coefficient reports,
//! demographic groups ranked for an item, and items ranked for a group.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::design::{ColumnTerm, DesignError};
use crate::reml::FitResult;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecommendError {
    #[error("factor `{0}` is not in the model")]
    UnknownFactor(String),
    #[error("factor `{0}` is not a fixed factor of the model")]
    NotFixed(String),
    #[error("no fitted models to rank")]
    NoFits,
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// One combination of factor levels; `None` leaves a factor unspecified.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupCell {
    pub values: Vec<(String, Option<String>)>,
}

impl GroupCell {
    pub fn new(values: impl IntoIterator<Item = (String, Option<String>)>) -> Self {
        Self { values: values.into_iter().collect() }
    }

    /// A cell with every factor unspecified.
    pub fn unspecified() -> Self {
        Self::default()
    }

    pub fn get(&self, factor: &str) -> Option<&str> {
        self.values.iter().find(|(f, _)| f == factor).and_then(|(_, l)| l.as_deref())
    }

    fn as_pairs(&self) -> Vec<(&str, Option<&str>)> {
        self.values.iter().map(|(f, l)| (f.as_str(), l.as_deref())).collect()
    }
}

impl std::fmt::Display for GroupCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> =
            self.values.iter().map(|(k, v)| format!("{k}={}", v.as_deref().unwrap_or("*"))).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientRow<T> {
    pub level: String,
    pub estimate: T,
    pub std_error: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientReport<T> {
    pub model_label: String,
    pub factor: String,
    pub rows: Vec<CoefficientRow<T>>,
    /// Levels whose column was dropped as aliased or unobserved.
    pub aliased: Vec<String>,
}

/// Fixed-effect estimates of `factor` with standard errors, in level order.
/// `factor = "intercept"` reports the intercept column.
pub fn coefficient_report<T: Real>(fit: &FitResult<T>, factor: &str) -> Result<CoefficientReport<T>, RecommendError> {
    let is_intercept = factor == "intercept";
    if !is_intercept && !fit.formula.is_fixed(factor) {
        return Err(if fit.formula.is_random(factor) {
            RecommendError::NotFixed(factor.to_string())
        } else {
            RecommendError::UnknownFactor(factor.to_string())
        });
    }
    let matches = |t: &ColumnTerm| match t {
        ColumnTerm::Intercept => is_intercept,
        ColumnTerm::Level { factor: f, .. } => f == factor,
    };
    let se = fit.fixed_standard_errors();
    let mut rows: Vec<(usize, CoefficientRow<T>)> = fit
        .fixed
        .iter()
        .zip(se)
        .filter(|(fe, _)| matches(&fe.term))
        .map(|(fe, std_error)| {
            let (order, level) = match &fe.term {
                ColumnTerm::Intercept => (0, "intercept".to_string()),
                ColumnTerm::Level { level, label, .. } => (*level, label.clone()),
            };
            (order, CoefficientRow { level, estimate: fe.estimate, std_error })
        })
        .collect();
    if is_intercept && rows.is_empty() {
        return Err(RecommendError::UnknownFactor(factor.to_string()));
    }
    rows.sort_by_key(|(o, _)| *o);
    let aliased = fit
        .dropped
        .iter()
        .filter(|t| matches(t))
        .map(|t| match t {
            ColumnTerm::Intercept => "intercept".to_string(),
            ColumnTerm::Level { label, .. } => label.clone(),
        })
        .collect();
    Ok(CoefficientReport {
        model_label: fit.formula.to_string(),
        factor: factor.to_string(),
        rows: rows.into_iter().map(|(_, r)| r).collect(),
        aliased,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCell<T> {
    pub cell: GroupCell,
    pub score: T,
    /// Training rows matching every specified level of the cell.
    pub support: usize,
}

/// Scores every combination of levels of the `by` factors and sorts them by
/// predicted rating, highest first. Ties keep level order.
pub fn rank_groups_for_item<T: Real>(fit: &FitResult<T>, by: &[&str]) -> Result<Vec<RankedCell<T>>, RecommendError> {
    let training = fit.training();
    let mut positions = Vec::with_capacity(by.len());
    let mut level_lists = Vec::with_capacity(by.len());
    for &f in by {
        if !fit.formula.factors().any(|m| m == f) {
            return Err(RecommendError::UnknownFactor(f.to_string()));
        }
        let fi = training.factor_index(f)?;
        positions.push(fi);
        level_lists.push(training.factors()[fi].levels.clone());
    }

    // Joint support counts over the `by` factors.
    let radix: Vec<usize> = level_lists.iter().map(Vec::len).collect();
    let n_cells: usize = radix.iter().product();
    let mut support = vec![0usize; n_cells];
    for i in 0..training.n_rows() {
        let mut idx = 0;
        for (&fi, &r) in positions.iter().zip(&radix) {
            idx = idx * r + training.code(i, fi);
        }
        support[idx] += 1;
    }

    let mut cells = Vec::with_capacity(n_cells);
    for (flat, &count) in support.iter().enumerate() {
        let mut rem = flat;
        let mut codes = vec![0; by.len()];
        for d in (0..by.len()).rev() {
            codes[d] = rem % radix[d];
            rem /= radix[d];
        }
        let cell = GroupCell::new(
            by.iter().zip(&codes).zip(&level_lists).map(|((f, &c), levels)| (f.to_string(), Some(levels[c].clone()))),
        );
        let score = fit.predict_cell(&cell.as_pairs())?;
        cells.push(RankedCell { cell, score, support: count });
    }
    cells.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(cells)
}

/// Top `k` items (e.g. genres) for a group, each scored by its own fit.
/// Factors the cell leaves out, or that a fit does not model, are taken at
/// population level. Ties keep item-name order.
pub fn rank_items_for_group<T: Real>(
    fits: &BTreeMap<String, FitResult<T>>,
    cell: &GroupCell,
    k: usize,
) -> Result<Vec<(String, T)>, RecommendError> {
    if fits.is_empty() {
        return Err(RecommendError::NoFits);
    }
    if k == 0 {
        return Err(RecommendError::ZeroK);
    }
    let mut scored = Vec::with_capacity(fits.len());
    for (item, fit) in fits {
        let pairs: Vec<(&str, Option<&str>)> =
            cell.as_pairs().into_iter().filter(|(f, _)| fit.formula.factors().any(|m| m == *f)).collect();
        scored.push((item.clone(), fit.predict_cell(&pairs)?));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    scored.truncate(k);
    Ok(scored)
}
