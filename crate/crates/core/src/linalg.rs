//! Small dense linear algebra: row-major matrices and a Cholesky factorization.
//!
//! Every system solved by the model code has dimension (fixed columns + random
//! levels), which for categorical demographics is a few dozen, so dense storage
//! is the right tool here.

#![allow(clippy::needless_range_loop)] // index loops mirror the textbook recurrences

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row slices. Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| self.row(i).iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)).collect()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scale(&self, c: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * c).collect() }
    }

    pub fn max_abs_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Returned when a matrix handed to [`Cholesky::factor`] is not positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotPositiveDefinite {
    /// Row at which a non-positive pivot appeared.
    pub pivot: usize,
}

/// Lower-triangular Cholesky factor `A = L Lᵀ` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: DenseMatrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors the lower triangle of `a`; the upper triangle is ignored.
    pub fn factor(a: &DenseMatrix<T>) -> Result<Self, NotPositiveDefinite> {
        assert_eq!(a.rows(), a.cols(), "Cholesky needs a square matrix");
        let n = a.rows();
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d = d - l[(j, k)] * l[(j, k)];
            }
            if !d.is_finite() || d <= T::zero() {
                return Err(NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &DenseMatrix<T> {
        &self.l
    }

    /// Solves `L w = b`.
    pub fn forward(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut w = b.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for k in 0..i {
                s = s - self.l[(i, k)] * w[k];
            }
            w[i] = s / self.l[(i, i)];
        }
        w
    }

    /// Solves `Lᵀ x = w`.
    pub fn backward(&self, w: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = w.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s = s - self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.dim());
        self.backward(&self.forward(b))
    }

    pub fn log_det(&self) -> T {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<T>() * T::lit(2.0)
    }

    /// Diagonal entry `(A⁻¹)_ii`, i.e. `‖L⁻¹ eᵢ‖²`.
    pub fn inverse_diagonal_entry(&self, i: usize) -> T {
        let n = self.dim();
        let mut w = vec![T::zero(); n];
        w[i] = T::one() / self.l[(i, i)];
        let mut acc = w[i] * w[i];
        for r in (i + 1)..n {
            let mut s = T::zero();
            for k in i..r {
                s = s - self.l[(r, k)] * w[k];
            }
            w[r] = s / self.l[(r, r)];
            acc = acc + w[r] * w[r];
        }
        acc
    }

    pub fn inverse(&self) -> DenseMatrix<T> {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for (i, v) in col.into_iter().enumerate() {
                inv[(i, j)] = v;
            }
        }
        // Symmetrize away round-off.
        for i in 0..n {
            for j in 0..i {
                let m = (inv[(i, j)] + inv[(j, i)]) * T::lit(0.5);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }
}

/// Greedy left-to-right selection of linearly independent columns from a Gram
/// matrix `AᵀA`, via an incremental Cholesky that skips columns whose residual
/// pivot falls below `rel_tol` times the largest diagonal entry.
pub fn independent_columns<T: Real>(gram: &DenseMatrix<T>, rel_tol: T) -> Vec<usize> {
    let n = gram.rows();
    let scale = (0..n).map(|i| gram[(i, i)]).fold(T::zero(), T::max);
    if scale.is_nan() || scale <= T::zero() {
        return Vec::new();
    }
    let threshold = rel_tol * scale;
    let mut kept: Vec<usize> = Vec::new();
    // Rows of the partial factor, one per kept column, indexed by kept position.
    let mut factor_rows: Vec<Vec<T>> = Vec::new();
    for j in 0..n {
        let mut row = Vec::with_capacity(kept.len() + 1);
        for (a, &ka) in kept.iter().enumerate() {
            let mut s = gram[(j, ka)];
            for b in 0..a {
                s = s - row[b] * factor_rows[a][b];
            }
            row.push(s / factor_rows[a][a]);
        }
        let d = row.iter().fold(gram[(j, j)], |acc, &r| acc - r * r);
        if d > threshold {
            row.push(d.sqrt());
            kept.push(j);
            factor_rows.push(row);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> DenseMatrix<f64> {
        DenseMatrix::from_rows(&[vec![4.0, 2.0, 0.6], vec![2.0, 5.0, 1.0], vec![0.6, 1.0, 3.0]])
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let c = Cholesky::factor(&a).unwrap();
        let llt = c.lower().matmul(&c.lower().transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert!((llt[(i, j)] - a[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inverse_and_diagonal_agree() {
        let c = Cholesky::factor(&spd3()).unwrap();
        let inv = c.inverse();
        let prod = spd3().matmul(&inv);
        for i in 0..3 {
            assert!((c.inverse_diagonal_entry(i) - inv[(i, i)]).abs() < 1e-14);
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - e).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn log_det_matches_product_of_pivots() {
        // det = 4*(5*3-1) - 2*(2*3-0.6) + 0.6*(2*1-5*0.6)
        let det: f64 = 4.0 * 14.0 - 2.0 * 5.4 + 0.6 * (2.0 - 3.0);
        let c = Cholesky::factor(&spd3()).unwrap();
        assert!((c.log_det() - det.ln()).abs() < 1e-13);
    }

    #[test]
    fn rejects_indefinite() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(Cholesky::factor(&a).unwrap_err().pivot, 1);
    }

    #[test]
    fn independent_columns_drops_duplicate() {
        // Columns: e0, e1, e0 again.
        let g = DenseMatrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]]);
        assert_eq!(independent_columns(&g, 1e-10), vec![0, 1]);
    }
}
