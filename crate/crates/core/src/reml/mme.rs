//! Henderson's mixed model equations and the likelihood evaluations built on them.
//!
//! All indicator designs are reduced once to the cross-product matrix of
//! `[X_kept | Z | y]`, after which every evaluation costs O((p+q)³) no matter
//! how many observations there are.
//!
//! Likelihood evaluations use the scaled system
//!
//! ```text
//! C* = [ XᵀX     XᵀZΛ        ]      rhs* = [ Xᵀy  ]
//!      [ ΛZᵀX    ΛZᵀZΛ + I   ]             [ ΛZᵀy ]
//! ```
//!
//! with `Λ = diag(√γ_k)`, which equals `S C S` for Henderson's `C` and
//! `S = diag(I, Λ)`. It stays well conditioned as γ_k → 0 and is defined at
//! γ_k = 0, where the random block decouples.

use crate::design::DesignMatrices;
use crate::linalg::{Cholesky, DenseMatrix};
use crate::scalar::Real;

use super::{Criterion, RemlError, VarianceComponents};

/// Coefficient matrix `C` and right-hand side of the mixed model equations.
#[derive(Debug, Clone)]
pub struct MixedModelEquations<T> {
    pub c: DenseMatrix<T>,
    pub rhs: Vec<T>,
    /// Number of kept fixed-effect columns.
    pub n_fixed: usize,
    /// Σ q_k.
    pub n_random: usize,
}

/// Solution `(τ̂, û)` together with the factorization of `C`.
#[derive(Debug, Clone)]
pub struct MmeSolution<T> {
    pub tau: Vec<T>,
    pub u: Vec<T>,
    pub factor: Cholesky<T>,
}

/// `C = [[XᵀX, XᵀZ], [ZᵀX, ZᵀZ + G⁻¹]]`, `rhs = [Xᵀy, Zᵀy]` with `R = I`
/// and `G = blockdiag(γ_k I)`. X is restricted to its kept columns.
pub fn assemble_mme<T: Real>(
    design: &DesignMatrices<T>,
    theta: &VarianceComponents<T>,
) -> Result<MixedModelEquations<T>, RemlError> {
    if theta.gamma.len() != design.z_blocks.len() {
        return Err(RemlError::GammaLength { want: design.z_blocks.len(), got: theta.gamma.len() });
    }
    for (g, b) in theta.gamma.iter().zip(&design.z_blocks) {
        if g.is_nan() || *g <= T::zero() {
            return Err(RemlError::ZeroVarianceRatio { factor: b.factor.clone(), value: g.as_f64() });
        }
    }
    let cross = CrossProducts::new(design);
    let n = cross.dim();
    let mut c = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = cross.gram[(i, j)];
        }
    }
    for (k, &g) in theta.gamma.iter().enumerate() {
        for i in cross.block_range(k) {
            c[(i, i)] = c[(i, i)] + g.recip();
        }
    }
    let rhs = (0..n).map(|i| cross.gram[(i, n)]).collect();
    Ok(MixedModelEquations { c, rhs, n_fixed: cross.n_fixed, n_random: cross.n_random() })
}

pub fn solve_mme<T: Real>(m: &MixedModelEquations<T>) -> Result<MmeSolution<T>, RemlError> {
    let factor = Cholesky::factor(&m.c).map_err(|e| RemlError::NotPositiveDefinite { pivot: e.pivot })?;
    let mut sol = factor.solve(&m.rhs);
    let u = sol.split_off(m.n_fixed);
    Ok(MmeSolution { tau: sol, u, factor })
}

/// Cross products of `[X_kept | Z | y]`.
#[derive(Debug, Clone)]
pub struct CrossProducts<T> {
    n_obs: usize,
    n_fixed: usize,
    block_sizes: Vec<usize>,
    gram: DenseMatrix<T>,
}

impl<T: Real> CrossProducts<T> {
    pub fn new(design: &DesignMatrices<T>) -> Self {
        let ncols_x = design.x.ncols();
        let mut map = vec![usize::MAX; ncols_x];
        for (new, &old) in design.kept_columns.iter().enumerate() {
            map[old] = new;
        }
        let p = design.kept_columns.len();
        let block_sizes: Vec<usize> = design.z_blocks.iter().map(|b| b.levels.len()).collect();
        let q: usize = block_sizes.iter().sum();
        let m = p + q;
        let mut gram = DenseMatrix::zeros(m + 1, m + 1);
        let mut idx = Vec::with_capacity(8);
        let mut yty = T::zero();
        for (i, &y) in design.y.iter().enumerate() {
            idx.clear();
            idx.extend(design.x.row(i).iter().map(|&c| map[c]).filter(|&c| c != usize::MAX));
            let mut offset = p;
            for b in &design.z_blocks {
                idx.extend(b.matrix.row(i).iter().map(|&c| c + offset));
                offset += b.levels.len();
            }
            for &a in &idx {
                for &b in &idx {
                    gram[(a, b)] = gram[(a, b)] + T::one();
                }
                gram[(a, m)] = gram[(a, m)] + y;
            }
            yty = yty + y * y;
        }
        for a in 0..m {
            gram[(m, a)] = gram[(a, m)];
        }
        gram[(m, m)] = yty;
        Self { n_obs: design.y.len(), n_fixed: p, block_sizes, gram }
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    pub fn n_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    pub fn n_random(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// Dimension of the mixed model equations.
    pub fn dim(&self) -> usize {
        self.n_fixed + self.n_random()
    }

    pub fn yty(&self) -> T {
        let m = self.dim();
        self.gram[(m, m)]
    }

    /// Row/column range of random block `k` within the equations.
    pub fn block_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.n_fixed + self.block_sizes[..k].iter().sum::<usize>();
        start..start + self.block_sizes[k]
    }

    fn column_scales(&self, gamma: &[T]) -> Vec<T> {
        let mut s = vec![T::one(); self.dim()];
        for (k, &g) in gamma.iter().enumerate() {
            let l = g.sqrt();
            for i in self.block_range(k) {
                s[i] = l;
            }
        }
        s
    }

    fn degrees_of_freedom(&self, criterion: Criterion) -> usize {
        match criterion {
            Criterion::Reml => self.n_obs - self.n_fixed,
            Criterion::Ml => self.n_obs,
        }
    }

    pub(crate) fn check_gamma(&self, gamma: &[T]) -> Result<(), RemlError> {
        if gamma.len() != self.n_blocks() {
            return Err(RemlError::GammaLength { want: self.n_blocks(), got: gamma.len() });
        }
        if let Some(g) = gamma.iter().find(|g| !(g.is_finite() && **g >= T::zero())) {
            return Err(RemlError::InvalidGamma(g.as_f64()));
        }
        if self.n_obs <= self.n_fixed {
            return Err(RemlError::Degenerate { n_obs: self.n_obs, n_fixed: self.n_fixed });
        }
        Ok(())
    }

    /// Factors the scaled system at `gamma` and solves it.
    pub(crate) fn scaled_system(&self, gamma: &[T]) -> Result<ScaledSystem<T>, RemlError> {
        self.check_gamma(gamma)?;
        let m = self.dim();
        let scales = self.column_scales(gamma);
        let mut c = DenseMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = self.gram[(i, j)] * scales[i] * scales[j];
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        for i in self.n_fixed..m {
            c[(i, i)] = c[(i, i)] + T::one();
        }
        let rhs: Vec<T> = (0..m).map(|i| self.gram[(i, m)] * scales[i]).collect();
        let chol = Cholesky::factor(&c).map_err(|e| RemlError::NotPositiveDefinite { pivot: e.pivot })?;
        let solution = chol.solve(&rhs);
        let fitted_ss = solution.iter().zip(&rhs).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let floor = (T::epsilon() * self.yty()).max(T::min_positive_value());
        let ypy = (self.yty() - fitted_ss).max(floor);
        Ok(ScaledSystem { c, chol, solution, scales, ypy })
    }

    /// Profiled log-likelihood at `gamma`, optionally with its gradient with
    /// respect to `ρ_k = log γ_k` (zero for components at the boundary).
    pub(crate) fn evaluate(
        &self,
        gamma: &[T],
        criterion: Criterion,
        with_gradient: bool,
    ) -> Result<Evaluation<T>, RemlError> {
        let sys = self.scaled_system(gamma)?;
        let df = T::from_usize(self.degrees_of_freedom(criterion)).unwrap();
        let sigma2 = sys.ypy / df;
        let two_pi = T::lit(std::f64::consts::TAU);

        // Random block of C*, needed by the ML criterion only.
        let random_chol = match criterion {
            Criterion::Reml => None,
            Criterion::Ml => Some(self.random_block_factor(&sys)?),
        };
        let log_det = match (&random_chol, criterion) {
            (_, Criterion::Reml) => sys.chol.log_det(),
            (Some(d), Criterion::Ml) => d.log_det(),
            (None, Criterion::Ml) => unreachable!(),
        };
        let loglik = -T::lit(0.5) * (df * ((two_pi * sigma2).ln() + T::one()) + log_det);

        let gradient = with_gradient.then(|| {
            (0..self.n_blocks())
                .map(|k| {
                    if gamma[k] == T::zero() {
                        return T::zero();
                    }
                    let range = self.block_range(k);
                    let qk = T::from_usize(range.len()).unwrap();
                    let trace: T = match &random_chol {
                        None => range.clone().map(|i| sys.chol.inverse_diagonal_entry(i)).sum(),
                        Some(d) => range.clone().map(|i| d.inverse_diagonal_entry(i - self.n_fixed)).sum(),
                    };
                    let quad: T = range.map(|i| sys.solution[i] * sys.solution[i]).sum();
                    -T::lit(0.5) * (qk - trace - df * quad / sys.ypy)
                })
                .collect()
        });

        Ok(Evaluation { loglik, sigma2, gradient, system: sys })
    }

    fn random_block_factor(&self, sys: &ScaledSystem<T>) -> Result<Cholesky<T>, RemlError> {
        let p = self.n_fixed;
        let q = self.n_random();
        let mut d = DenseMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..q {
                d[(i, j)] = sys.c[(p + i, p + j)];
            }
        }
        Cholesky::factor(&d).map_err(|e| RemlError::NotPositiveDefinite { pivot: p + e.pivot })
    }

    /// ∂ℓ/∂γ_k evaluated at `gamma`, where `gamma[k] == 0`.
    ///
    /// Uses `P = I − W C*⁻¹ Wᵀ` with `W = [X, ZΛ]` (REML) or
    /// `V⁻¹ = I − ZΛ D⁻¹ ΛZᵀ` (ML), which remain valid on the boundary.
    pub(crate) fn boundary_slope(&self, gamma: &[T], k: usize, criterion: Criterion) -> Result<T, RemlError> {
        debug_assert!(gamma[k] == T::zero());
        let sys = self.scaled_system(gamma)?;
        let m = self.dim();
        let df = T::from_usize(self.degrees_of_freedom(criterion)).unwrap();
        let range = self.block_range(k);

        // Z_kᵀ P y = Z_kᵀ y − B_kᵀ sol, with B_k = Wᵀ Z_k.
        let mut trace = T::zero();
        let mut quad = T::zero();
        let random_chol = match criterion {
            Criterion::Reml => None,
            Criterion::Ml => Some(self.random_block_factor(&sys)?),
        };
        for j in range {
            let b: Vec<T> = (0..m).map(|i| self.gram[(i, j)] * sys.scales[i]).collect();
            let btcb = match &random_chol {
                None => dot(&b, &sys.chol.solve(&b)),
                // The ML marginal covariance does not involve X.
                Some(d) => {
                    let bz = &b[self.n_fixed..];
                    dot(bz, &d.solve(bz))
                }
            };
            trace = trace + self.gram[(j, j)] - btcb;
            let r = self.gram[(j, m)] - dot(&b, &sys.solution);
            quad = quad + r * r;
        }
        Ok(-T::lit(0.5) * (trace - df * quad / sys.ypy))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Factored scaled system at one value of γ.
#[derive(Debug, Clone)]
pub(crate) struct ScaledSystem<T> {
    pub c: DenseMatrix<T>,
    pub chol: Cholesky<T>,
    /// `[τ̂; v]` with `û = Λ v`.
    pub solution: Vec<T>,
    /// Diagonal of `S = diag(I, Λ)`.
    pub scales: Vec<T>,
    /// `yᵀ P y`, floored at a tiny positive value.
    pub ypy: T,
}

impl<T: Real> ScaledSystem<T> {
    /// `(τ̂, û)` in the original (unscaled) coordinates.
    pub fn estimates(&self, n_fixed: usize) -> (Vec<T>, Vec<T>) {
        let tau = self.solution[..n_fixed].to_vec();
        let u = self.solution[n_fixed..].iter().zip(&self.scales[n_fixed..]).map(|(&v, &s)| v * s).collect();
        (tau, u)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Evaluation<T> {
    pub loglik: T,
    pub sigma2: T,
    pub gradient: Option<Vec<T>>,
    pub system: ScaledSystem<T>,
}
