//! Hold-out evaluation: seeded train/test splits, MAE and repeated random
//! sub-sampling against a global-mean baseline.
//!
//! Splits are reproducible across releases: the generator is ChaCha8 seeded
//! through `SeedableRng::seed_from_u64`, and the permutation is a
//! Fisher–Yates shuffle from the last index down, drawing each bound with
//! Lemire's widening multiply with rejection on raw `next_u64` output.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::design::{DesignError, ObservationTable};
use crate::formula::ModelFormula;
use crate::reml::{fit_reml, predict, FitOptions, RemlError};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("need at least 2 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("split leaves an empty side ({train} train / {test} test rows)")]
    EmptySide { train: usize, test: usize },
    #[error("prediction and actual lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot compute MAE of empty vectors")]
    Empty,
    #[error("repeats must be at least 1")]
    NoRepeats,
    #[error("repeat {repeat} (seed {seed}): {source}")]
    Fit { repeat: usize, seed: u64, source: RemlError },
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Uniform integer in `0..bound` (Lemire's method).
fn bounded(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let threshold = bound.wrapping_neg() % bound;
    loop {
        let m = u128::from(rng.next_u64()) * u128::from(bound);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Row indices of the train and test sides, each in ascending order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    if n < 2 {
        return Err(EvalError::TooFewRows(n));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EvalError::BadFraction(train_fraction));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(EvalError::EmptySide { train: n_train, test: n - n_train });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_train_test<T: Real>(
    table: &ObservationTable<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(ObservationTable<T>, ObservationTable<T>), EvalError> {
    let (train, test) = split_indices(table.n_rows(), train_fraction, seed)?;
    Ok((table.subset(&train), table.subset(&test)))
}

/// Mean absolute error `Σ|Pᵢ − aᵢ| / n`.
pub fn mae<T: Real>(predicted: &[T], actual: &[T]) -> Result<T, EvalError> {
    if predicted.len() != actual.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: T = predicted.iter().zip(actual).map(|(&p, &a)| (p - a).abs()).sum();
    Ok(total / T::from_usize(predicted.len()).unwrap())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOptions {
    pub repeats: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Clamp predictions into this range before scoring.
    pub clip: Option<(f64, f64)>,
    pub fit: FitOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { repeats: 5, train_fraction: 0.8, seed: 42, clip: None, fit: FitOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: f64,
    /// MAE of predicting the training mean for every test row.
    pub baseline_mae: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model_label: String,
    pub split_seed: u64,
    pub mae: f64,
    pub mae_min: f64,
    pub mae_max: f64,
    pub baseline_mae: f64,
    pub n_test: usize,
    pub repeats: Vec<RepeatResult>,
}

/// Repeated random hold-out: repeat `r` splits with seed `seed + r`, fits on
/// the train side, predicts the test side and scores both the model and the
/// global-mean baseline on it.
pub fn cross_validate<T: Real>(
    formula: &ModelFormula,
    table: &ObservationTable<T>,
    opts: &CvOptions,
) -> Result<EvalReport, EvalError> {
    if opts.repeats == 0 {
        return Err(EvalError::NoRepeats);
    }
    let results: Vec<RepeatResult> =
        (0..opts.repeats).into_par_iter().map(|r| run_repeat(formula, table, opts, r)).collect::<Result<_, _>>()?;

    let k = results.len() as f64;
    let mae_mean = results.iter().map(|r| r.mae).sum::<f64>() / k;
    Ok(EvalReport {
        model_label: formula.to_string(),
        split_seed: opts.seed,
        mae: mae_mean,
        mae_min: results.iter().map(|r| r.mae).fold(f64::INFINITY, f64::min),
        mae_max: results.iter().map(|r| r.mae).fold(f64::NEG_INFINITY, f64::max),
        baseline_mae: results.iter().map(|r| r.baseline_mae).sum::<f64>() / k,
        n_test: results[0].n_test,
        repeats: results,
    })
}

fn run_repeat<T: Real>(
    formula: &ModelFormula,
    table: &ObservationTable<T>,
    opts: &CvOptions,
    repeat: usize,
) -> Result<RepeatResult, EvalError> {
    let seed = opts.seed.wrapping_add(repeat as u64);
    let (train, test) = split_train_test(table, opts.train_fraction, seed)?;
    let fit = fit_reml(formula, &train, &opts.fit).map_err(|source| EvalError::Fit { repeat, seed, source })?;
    let mut predicted = predict(&fit, &test)?;
    if let Some((lo, hi)) = opts.clip {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        predicted.iter_mut().for_each(|p| *p = p.max(lo).min(hi));
    }
    let actual = test.responses();
    let mean = train.responses().iter().copied().sum::<T>() / T::from_usize(train.n_rows()).unwrap();
    let baseline = vec![mean; actual.len()];
    Ok(RepeatResult {
        repeat,
        seed,
        n_train: train.n_rows(),
        n_test: test.n_rows(),
        mae: mae(&predicted, actual)?.as_f64(),
        baseline_mae: mae(&baseline, actual)?.as_f64(),
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3.0, 4.0], &[4.0, 4.0]).unwrap(), 0.5);
        assert_eq!(mae(&[2.0, 1.0], &[2.0, 1.0]).unwrap(), 0.0);
        assert!((mae::<f64>(&[1.0, 5.0, 3.0], &[2.0, 2.0, 2.0]).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mae::<f64>(&[1.0], &[1.0, 2.0]), Err(EvalError::LengthMismatch(1, 2)));
        assert_eq!(mae::<f64>(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn split_partition() {
        for seed in [0, 1, 99] {
            let (train, test) = split_indices(10, 0.8, seed).unwrap();
            assert_eq!((train.len(), test.len()), (8, 2));
            let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_determinism() {
        assert_eq!(split_indices(1000, 0.8, 7).unwrap(), split_indices(1000, 0.8, 7).unwrap());
        assert_ne!(split_indices(1000, 0.8, 7).unwrap().0, split_indices(1000, 0.8, 8).unwrap().0);
    }

    #[test]
    fn split_errors() {
        assert_eq!(split_indices(1, 0.8, 0), Err(EvalError::TooFewRows(1)));
        assert_eq!(split_indices(10, 1.0, 0), Err(EvalError::BadFraction(1.0)));
        assert_eq!(split_indices(10, 0.0, 0), Err(EvalError::BadFraction(0.0)));
        assert!(matches!(split_indices(2, 0.1, 0), Err(EvalError::EmptySide { .. })));
    }

    #[test]
    fn bounded_draws_cover_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 7];
        for _ in 0..500 {
            seen[bounded(&mut rng, 7) as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
