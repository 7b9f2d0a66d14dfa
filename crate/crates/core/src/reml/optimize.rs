//! Maximization of the profiled likelihood over log variance ratios.
//!
//! BFGS with a backtracking line search on `ρ_k = log γ_k`, a golden-section
//! coordinate sweep when the quasi-Newton direction stops making progress, a
//! short Newton polish once converged, and explicit handling of the γ_k = 0
//! boundary.

use crate::linalg::{Cholesky, DenseMatrix};
use crate::scalar::Real;

use super::mme::CrossProducts;
use super::{Criterion, FitOptions, RemlError};

/// Largest move in any log-ratio coordinate per line search.
const MAX_STEP: f64 = 4.0;
const ARMIJO: f64 = 1e-4;
const GOLDEN_ITERS: usize = 60;
const POLISH_STEPS: usize = 8;

#[derive(Debug, Clone)]
pub(crate) struct Outcome<T> {
    pub gamma: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

struct Problem<'a, T> {
    cross: &'a CrossProducts<T>,
    criterion: Criterion,
    opts: &'a FitOptions,
    log_floor: T,
}

impl<T: Real> Problem<'_, T> {
    fn gamma_from(&self, base: &[T], active: &[usize], rho: &[T]) -> Vec<T> {
        let mut g = base.to_vec();
        for (&k, &r) in active.iter().zip(rho) {
            g[k] = r.exp();
        }
        g
    }

    /// Log-likelihood and its gradient on the active coordinates.
    /// Numerical failures read as −∞ so line searches back away from them.
    fn value_grad(&self, gamma: &[T], active: &[usize]) -> Result<(T, Vec<T>), RemlError> {
        match self.cross.evaluate(gamma, self.criterion, true) {
            Ok(ev) => {
                let g = ev.gradient.unwrap();
                Ok((ev.loglik, active.iter().map(|&k| g[k]).collect()))
            }
            Err(RemlError::NotPositiveDefinite { .. }) => Ok((T::neg_infinity(), vec![T::zero(); active.len()])),
            Err(e) => Err(e),
        }
    }

    fn value(&self, gamma: &[T]) -> Result<T, RemlError> {
        match self.cross.evaluate(gamma, self.criterion, false) {
            Ok(ev) => Ok(ev.loglik),
            Err(RemlError::NotPositiveDefinite { .. }) => Ok(T::neg_infinity()),
            Err(e) => Err(e),
        }
    }
}

fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn maximize<T: Real>(
    cross: &CrossProducts<T>,
    criterion: Criterion,
    opts: &FitOptions,
) -> Result<Outcome<T>, RemlError> {
    let k = cross.n_blocks();
    let problem = Problem { cross, criterion, opts, log_floor: T::lit(opts.boundary_gamma.ln()) };
    let mut gamma = vec![T::lit(opts.initial_gamma); k];
    if k == 0 {
        cross.check_gamma(&gamma)?;
        return Ok(Outcome { gamma, iterations: 0, converged: true });
    }

    let mut iterations = 0;
    let mut converged = false;
    let tol_ll = T::lit(opts.tol_loglik);
    // Each round can move at most one component on or off the boundary in each
    // direction; the cap only guards against cycling on flat surfaces.
    for _round in 0..(2 * k + 2) {
        converged = bfgs(&problem, &mut gamma, &mut iterations)?;
        if converged && opts.polish {
            polish(&problem, &mut gamma)?;
        }

        let mut changed = false;
        let mut best = problem.value(&gamma)?;
        for j in 0..k {
            if gamma[j] == T::zero() {
                continue;
            }
            let mut trial = gamma.clone();
            trial[j] = T::zero();
            let at_zero = problem.value(&trial)?;
            if at_zero >= best - tol_ll && cross.boundary_slope(&trial, j, criterion)? <= T::zero() {
                gamma = trial;
                best = at_zero;
                changed = true;
            }
        }
        for j in 0..k {
            if gamma[j] == T::zero() && cross.boundary_slope(&gamma, j, criterion)? > T::lit(opts.tol_gradient) {
                gamma[j] = T::lit(opts.boundary_gamma.sqrt());
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Outcome { gamma, iterations, converged })
}

/// Runs BFGS on the components that are off the boundary. Components whose
/// log ratio falls below the boundary threshold are pinned to zero and the
/// search restarts on the rest. Returns whether the convergence test passed.
fn bfgs<T: Real>(problem: &Problem<'_, T>, gamma: &mut Vec<T>, iterations: &mut usize) -> Result<bool, RemlError> {
    let opts = problem.opts;
    let tol_ll = T::lit(opts.tol_loglik);
    let tol_g = T::lit(opts.tol_gradient);
    'restart: loop {
        let active: Vec<usize> = (0..gamma.len()).filter(|&j| gamma[j] > T::zero()).collect();
        if active.is_empty() {
            return Ok(true);
        }
        let m = active.len();
        let mut rho: Vec<T> = active.iter().map(|&j| gamma[j].ln()).collect();
        let (mut ll, mut grad) = problem.value_grad(gamma, &active)?;
        if !ll.is_finite() {
            return Err(RemlError::NotPositiveDefinite { pivot: 0 });
        }
        // Inverse Hessian approximation of −ℓ.
        let mut h = DenseMatrix::<T>::identity(m);
        let mut fresh = true;
        loop {
            if max_abs(&grad) < tol_g * T::lit(1e-3) {
                return Ok(true);
            }
            if *iterations >= opts.max_iter {
                return Ok(false);
            }
            *iterations += 1;

            let mut dir = h.mul_vec(&grad);
            if dot(&dir, &grad) <= T::zero() {
                h = DenseMatrix::identity(m);
                fresh = true;
                dir = grad.clone();
            }
            let biggest = max_abs(&dir);
            if biggest > T::lit(MAX_STEP) {
                let s = T::lit(MAX_STEP) / biggest;
                dir.iter_mut().for_each(|d| *d = *d * s);
            }

            let slope = dot(&grad, &dir);
            let mut step = T::one();
            let mut accepted = None;
            for _ in 0..50 {
                let trial: Vec<T> = rho.iter().zip(&dir).map(|(&r, &d)| r + step * d).collect();
                let g_trial = problem.gamma_from(gamma, &active, &trial);
                let (ll_t, grad_t) = problem.value_grad(&g_trial, &active)?;
                if ll_t.is_finite() && ll_t >= ll + T::lit(ARMIJO) * step * slope {
                    accepted = Some((trial, ll_t, grad_t));
                    break;
                }
                step = step * T::lit(0.5);
            }

            let (new_rho, new_ll, new_grad) = match accepted {
                Some(a) => a,
                None if !fresh => {
                    h = DenseMatrix::identity(m);
                    fresh = true;
                    continue;
                }
                None => match golden_sweep(problem, gamma, &active, &rho, ll)? {
                    Some((r, l)) => {
                        let g_new = problem.gamma_from(gamma, &active, &r);
                        let (_, gr) = problem.value_grad(&g_new, &active)?;
                        (r, l, gr)
                    }
                    None => {
                        *gamma = problem.gamma_from(gamma, &active, &rho);
                        return Ok(max_abs(&grad) < tol_g);
                    }
                },
            };

            let delta_ll = new_ll - ll;
            *gamma = problem.gamma_from(gamma, &active, &new_rho);
            if new_rho.iter().any(|&r| r < problem.log_floor) {
                for (&j, &r) in active.iter().zip(&new_rho) {
                    if r < problem.log_floor {
                        gamma[j] = T::zero();
                    }
                }
                continue 'restart;
            }

            // BFGS update on −ℓ: s = Δρ, y = Δ(−∇ℓ).
            let s: Vec<T> = new_rho.iter().zip(&rho).map(|(&a, &b)| a - b).collect();
            let y: Vec<T> = grad.iter().zip(&new_grad).map(|(&a, &b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > T::epsilon() * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                if fresh {
                    let scale = sy / dot(&y, &y);
                    h = DenseMatrix::identity(m).scale(scale);
                    fresh = false;
                }
                bfgs_update(&mut h, &s, &y, sy);
            }

            rho = new_rho;
            ll = new_ll;
            grad = new_grad;
            if delta_ll.abs() < tol_ll && max_abs(&grad) < tol_g {
                return Ok(true);
            }
        }
    }
}

fn bfgs_update<T: Real>(h: &mut DenseMatrix<T>, s: &[T], y: &[T], sy: T) {
    let m = s.len();
    let r = sy.recip();
    let hy = h.mul_vec(y);
    let yhy = dot(y, &hy);
    for i in 0..m {
        for j in 0..m {
            h[(i, j)] = h[(i, j)] - r * (hy[i] * s[j] + s[i] * hy[j]) + (r * r * yhy + r) * s[i] * s[j];
        }
    }
}

/// Golden-section search along each active coordinate in turn. Returns the
/// improved point, or `None` if no coordinate moved the likelihood.
fn golden_sweep<T: Real>(
    problem: &Problem<'_, T>,
    gamma: &[T],
    active: &[usize],
    rho: &[T],
    ll: T,
) -> Result<Option<(Vec<T>, T)>, RemlError> {
    let ratio = T::lit((5f64.sqrt() - 1.0) / 2.0);
    let mut point = rho.to_vec();
    let mut best = ll;
    for c in 0..point.len() {
        let eval = |x: T, point: &[T]| -> Result<T, RemlError> {
            let mut p = point.to_vec();
            p[c] = x;
            problem.value(&problem.gamma_from(gamma, active, &p))
        };
        let (mut a, mut b) = (point[c] - T::lit(MAX_STEP), point[c] + T::lit(MAX_STEP));
        let mut x1 = b - ratio * (b - a);
        let mut x2 = a + ratio * (b - a);
        let mut f1 = eval(x1, &point)?;
        let mut f2 = eval(x2, &point)?;
        for _ in 0..GOLDEN_ITERS {
            if f1 >= f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - ratio * (b - a);
                f1 = eval(x1, &point)?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + ratio * (b - a);
                f2 = eval(x2, &point)?;
            }
        }
        let (x, f) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
        if f > best {
            point[c] = x;
            best = f;
        }
    }
    Ok((best > ll).then_some((point, best)))
}

/// Newton steps with a finite-difference Hessian of the analytic gradient,
/// accepted only while they keep improving the likelihood.
fn polish<T: Real>(problem: &Problem<'_, T>, gamma: &mut Vec<T>) -> Result<(), RemlError> {
    let active: Vec<usize> = (0..gamma.len()).filter(|&j| gamma[j] > T::zero()).collect();
    if active.is_empty() {
        return Ok(());
    }
    let m = active.len();
    let mut rho: Vec<T> = active.iter().map(|&j| gamma[j].ln()).collect();
    let (mut ll, mut grad) = problem.value_grad(gamma, &active)?;
    for _ in 0..POLISH_STEPS {
        if max_abs(&grad) <= T::epsilon() * T::lit(16.0) {
            break;
        }
        let mut neg_hess = DenseMatrix::zeros(m, m);
        for j in 0..m {
            let h = T::lit(1e-5) * rho[j].abs().max(T::one());
            let mut up = rho.clone();
            up[j] = up[j] + h;
            let mut down = rho.clone();
            down[j] = down[j] - h;
            let (_, gu) = problem.value_grad(&problem.gamma_from(gamma, &active, &up), &active)?;
            let (_, gd) = problem.value_grad(&problem.gamma_from(gamma, &active, &down), &active)?;
            for i in 0..m {
                neg_hess[(i, j)] = -(gu[i] - gd[i]) / (h + h);
            }
        }
        for i in 0..m {
            for j in 0..i {
                let v = (neg_hess[(i, j)] + neg_hess[(j, i)]) * T::lit(0.5);
                neg_hess[(i, j)] = v;
                neg_hess[(j, i)] = v;
            }
        }
        let Ok(chol) = Cholesky::factor(&neg_hess) else { break };
        let step = chol.solve(&grad);
        if max_abs(&step) > T::one() {
            break;
        }
        let trial: Vec<T> = rho.iter().zip(&step).map(|(&r, &d)| r + d).collect();
        if trial.iter().any(|&r| r < problem.log_floor) {
            break;
        }
        let g_trial = problem.gamma_from(gamma, &active, &trial);
        let (ll_t, grad_t) = problem.value_grad(&g_trial, &active)?;
        let slack = T::epsilon() * T::lit(64.0) * ll.abs().max(T::one());
        if !(ll_t >= ll - slack && max_abs(&grad_t) < max_abs(&grad)) {
            break;
        }
        rho = trial;
        ll = ll_t;
        grad = grad_t;
        *gamma = g_trial;
    }
    Ok(())
}
