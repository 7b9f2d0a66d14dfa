#![allow(clippy::needless_range_loop)]

use super::*;
use crate::design::{build_design, Factor};
use crate::formula::parse_formula;

fn two_obs(y1: f64, y2: f64) -> ObservationTable<f64> {
    let mut t = ObservationTable::new(vec![Factor::new("g", ["g1", "g2"])]).unwrap();
    t.push_row(y1, &[0]).unwrap();
    t.push_row(y2, &[1]).unwrap();
    t
}

fn vc(gamma: Vec<f64>) -> VarianceComponents<f64> {
    VarianceComponents { sigma2: 1.0, gamma }
}

// C = [[2,1,1],[1,2,0],[1,0,2]]; its inverse by cofactors (det 4).
const HAND_C: [[f64; 3]; 3] = [[2.0, 1.0, 1.0], [1.0, 2.0, 0.0], [1.0, 0.0, 2.0]];
const HAND_C_INV: [[f64; 3]; 3] = [[1.0, -0.5, -0.5], [-0.5, 0.75, 0.25], [-0.5, 0.25, 0.75]];

#[test]
fn hand_assembled_three_by_three() {
    let t = two_obs(1.0, 3.0);
    let d = build_design(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t).unwrap();
    let m = assemble_mme(&d, &vc(vec![1.0])).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(m.c[(i, j)], HAND_C[i][j]);
        }
    }
    assert_eq!(m.rhs, vec![4.0, 1.0, 3.0]);
    assert_eq!((m.n_fixed, m.n_random), (1, 2));

    let sol = solve_mme(&m).unwrap();
    let x: Vec<f64> = sol.tau.iter().chain(&sol.u).copied().collect();
    let residual = m.c.mul_vec(&x).iter().zip(&m.rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(residual < 1e-12);
    // By hand: μ = 2, u = (−0.5, 0.5).
    assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] + 0.5).abs() < 1e-12 && (x[2] - 0.5).abs() < 1e-12);

    let inv = sol.factor.inverse();
    for i in 0..3 {
        for j in 0..3 {
            assert!((inv[(i, j)] - HAND_C_INV[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_system() {
    let m = MixedModelEquations { c: DenseMatrix::identity(3), rhs: vec![1.0, 0.0, 0.0], n_fixed: 1, n_random: 2 };
    let s = solve_mme(&m).unwrap();
    assert_eq!((s.tau, s.u), (vec![1.0], vec![0.0, 0.0]));
}

#[test]
fn no_random_terms_gives_normal_equations() {
    let t = two_obs(1.0, 3.0);
    let d = build_design(&parse_formula("y ~ -1 + g").unwrap(), &t).unwrap();
    let m = assemble_mme(&d, &vc(vec![])).unwrap();
    assert_eq!(m.c, DenseMatrix::identity(2));
    assert_eq!(m.rhs, vec![1.0, 3.0]);
}

#[test]
fn huge_ratio_drops_penalty() {
    let t = two_obs(1.0, 3.0);
    let d = build_design(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t).unwrap();
    let m = assemble_mme(&d, &vc(vec![1e8])).unwrap();
    assert!((m.c[(1, 1)] - 1.0).abs() < 1e-7 && (m.c[(2, 2)] - 1.0).abs() < 1e-7);
}

#[test]
fn zero_ratio_is_rejected() {
    let t = two_obs(1.0, 3.0);
    let d = build_design(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t).unwrap();
    assert!(matches!(assemble_mme(&d, &vc(vec![0.0])), Err(RemlError::ZeroVarianceRatio { .. })));
}

#[test]
fn gamma_length_checked() {
    let t = two_obs(1.0, 3.0);
    let d = build_design(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t).unwrap();
    assert_eq!(reml_loglik(&d, &[1.0, 1.0]), Err(RemlError::GammaLength { want: 1, got: 2 }));
    assert!(matches!(reml_loglik(&d, &[-1.0]), Err(RemlError::InvalidGamma(_))));
}

#[test]
fn degenerate_when_fixed_columns_exhaust_data() {
    let t = two_obs(1.0, 3.0);
    let d = build_design(&parse_formula("y ~ -1 + g").unwrap(), &t).unwrap();
    assert_eq!(reml_loglik(&d, &[]), Err(RemlError::Degenerate { n_obs: 2, n_fixed: 2 }));
}

#[test]
fn scaled_and_unscaled_systems_agree() {
    // The scaled system the optimizer uses must reproduce Henderson's C⁻¹.
    let mut t = ObservationTable::new(vec![Factor::new("g", ["a", "b", "c"]), Factor::new("h", ["x", "y"])]).unwrap();
    for (i, y) in [1.0, 2.5, 2.0, 4.0, 3.5, 0.5, 2.2].into_iter().enumerate() {
        t.push_row(y, &[i % 3, i % 2]).unwrap();
    }
    let d = build_design(&parse_formula("y ~ h + (1|g)").unwrap(), &t).unwrap();
    let gamma = 0.7;
    let m = assemble_mme(&d, &vc(vec![gamma])).unwrap();
    let henderson = solve_mme(&m).unwrap();
    let ev = CrossProducts::new(&d).evaluate(&[gamma], Criterion::Reml, false).unwrap();
    let (tau, u) = ev.system.estimates(m.n_fixed);
    for (a, b) in henderson.tau.iter().chain(&henderson.u).zip(tau.iter().chain(&u)) {
        assert!((a - b).abs() < 1e-12);
    }
    let hinv = henderson.factor.inverse();
    let sinv = ev.system.chol.inverse();
    let s = &ev.system.scales;
    for i in 0..hinv.rows() {
        for j in 0..hinv.cols() {
            assert!((hinv[(i, j)] - s[i] * sinv[(i, j)] * s[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn intercept_only_covariance_is_variance_of_mean() {
    let mut t = ObservationTable::new(vec![Factor::new("g", ["a"])]).unwrap();
    let ys = [2.0, 4.0, 9.0, 1.0, 3.0];
    for y in ys {
        t.push_row(y, &[0]).unwrap();
    }
    let f = fit_reml(&parse_formula("y ~ 1").unwrap(), &t, &FitOptions::default()).unwrap();
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let s2 = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((f.intercept() - mean).abs() < 1e-12);
    assert!((f.theta.sigma2 - s2).abs() < 1e-12);
    let cov = estimate_covariance(&f);
    assert_eq!((cov.rows(), cov.cols()), (1, 1));
    assert!((cov[(0, 0)] - s2 / n).abs() < 1e-12);
}

#[test]
fn fitted_covariance_matches_explicit_inverse() {
    let mut t = ObservationTable::new(vec![Factor::new("g", ["a", "b", "c"])]).unwrap();
    for (y, g) in [(1.0, 0), (1.4, 0), (4.0, 1), (4.5, 1), (2.0, 2), (2.9, 2), (0.8, 0)] {
        t.push_row(y, &[g]).unwrap();
    }
    let formula = parse_formula("y ~ 1 + (1|g)").unwrap();
    let f = fit_reml(&formula, &t, &FitOptions::default()).unwrap();
    let gamma = f.theta.gamma[0];
    assert!(gamma > 0.0);
    let d = build_design(&formula, &t).unwrap();
    let inv = solve_mme(&assemble_mme(&d, &vc(vec![gamma])).unwrap()).unwrap().factor.inverse();
    let cov = estimate_covariance(&f);
    for i in 0..4 {
        assert!(cov[(i, i)] > 0.0);
        for j in 0..4 {
            assert!((cov[(i, j)] - f.theta.sigma2 * inv[(i, j)]).abs() < 1e-12);
        }
    }
    let se = f.fixed_standard_errors();
    assert!((se[0] - cov[(0, 0)].sqrt()).abs() < 1e-14);
    assert_eq!(f.fixed_covariance()[(0, 0)], cov[(0, 0)]);
}

#[test]
fn constant_responses() {
    let mut t = ObservationTable::<f64>::new(vec![Factor::new("g", ["a", "b", "c"])]).unwrap();
    for i in 0..9 {
        t.push_row(3.0, &[i % 3]).unwrap();
    }
    let f = fit_reml(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t, &FitOptions::default()).unwrap();
    assert!(f.converged);
    assert_eq!(f.theta.gamma, vec![0.0]);
    assert!((f.intercept() - 3.0).abs() < 1e-12);
    // σ̂² sits at the floor yᵀPy = ε·yᵀy.
    let floor = f64::EPSILON * 81.0 / 8.0;
    assert!(f.theta.sigma2 > 0.0 && f.theta.sigma2 <= floor * (1.0 + 1e-12));
    assert!(f.loglik.is_finite());
}

#[test]
fn predicts_training_rows_as_fitted_values() {
    let mut t = ObservationTable::new(vec![Factor::new("g", ["a", "b"]), Factor::new("h", ["x", "y", "z"])]).unwrap();
    for (i, y) in [3.0, 4.0, 2.5, 5.0, 3.3, 4.1, 2.0, 3.9].into_iter().enumerate() {
        t.push_row(y, &[i % 2, i % 3]).unwrap();
    }
    let f = fit_reml(&parse_formula("y ~ g + (1|h)").unwrap(), &t, &FitOptions::default()).unwrap();
    let pred = predict(&f, &t).unwrap();
    let d = build_design(&f.formula, &t).unwrap();
    let tau: Vec<f64> = f.fixed.iter().map(|e| e.estimate).collect();
    let u = &f.random[0].estimates;
    for i in 0..t.n_rows() {
        let xt: f64 = d.kept_columns.iter().zip(&tau).filter(|(&c, _)| d.x.get(i, c)).map(|(_, v)| v).sum();
        let fitted = xt + u[d.z_blocks[0].matrix.row(i)[0]];
        assert!((pred[i] - fitted).abs() < 1e-12);
        assert_eq!(
            pred[i],
            f.predict_cell(&[
                ("g", Some(&t.factors()[0].levels[t.code(i, 0)])),
                ("h", Some(&t.factors()[1].levels[t.code(i, 1)]))
            ])
            .unwrap()
        );
    }
}

#[test]
fn f32_instantiation() {
    let mut t = ObservationTable::<f32>::new(vec![Factor::new("g", ["a", "b", "c"])]).unwrap();
    for (y, g) in [(1.0f32, 0), (1.4, 0), (4.0, 1), (4.5, 1), (2.0, 2), (2.9, 2), (0.8, 0)] {
        t.push_row(y, &[g]).unwrap();
    }
    let opts = FitOptions { tol_gradient: 1e-3, tol_loglik: 1e-5, ..FitOptions::default() };
    let f32_fit = fit_reml(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t, &opts).unwrap();
    let t64 = {
        let mut t64 = ObservationTable::<f64>::new(t.factors().to_vec()).unwrap();
        for i in 0..t.n_rows() {
            t64.push_row(f64::from(t.response(i)), &[t.code(i, 0)]).unwrap();
        }
        t64
    };
    let f64_fit = fit_reml(&parse_formula("y ~ 1 + (1|g)").unwrap(), &t64, &FitOptions::default()).unwrap();
    assert!((f64::from(f32_fit.intercept()) - f64_fit.intercept()).abs() < 1e-3);
    assert!((f64::from(f32_fit.loglik) - f64_fit.loglik).abs() < 1e-3);
}
