//! Observation tables and the indicator design matrices built from them.

use thiserror::Error;

use crate::formula::ModelFormula;
use crate::linalg::{independent_columns, DenseMatrix};
use crate::scalar::Real;

/// Relative pivot tolerance used when dropping aliased fixed-effect columns.
pub const ALIASING_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("observation table has no rows")]
    EmptyTable,
    #[error("duplicate factor `{0}` in table")]
    DuplicateFactor(String),
    #[error("row has {got} level codes, table declares {want} factors")]
    RowArity { got: usize, want: usize },
    #[error("level code {code} out of range for factor `{factor}` ({levels} levels)")]
    LevelOutOfRange { factor: String, code: usize, levels: usize },
    #[error("unknown level `{level}` for factor `{factor}`; valid levels: {valid}")]
    UnknownLevel { factor: String, level: String, valid: String },
    #[error("response must be finite, got {0}")]
    NonFiniteResponse(f64),
}

/// A categorical factor with its ordered level labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
}

impl Factor {
    pub fn new(name: impl Into<String>, levels: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { name: name.into(), levels: levels.into_iter().map(Into::into).collect() }
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }
}

/// Responses together with one level code per declared factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable<T> {
    factors: Vec<Factor>,
    responses: Vec<T>,
    // Row-major, `factors.len()` codes per row.
    codes: Vec<u32>,
}

impl<T: Real> ObservationTable<T> {
    pub fn new(factors: Vec<Factor>) -> Result<Self, DesignError> {
        for (i, f) in factors.iter().enumerate() {
            if factors[..i].iter().any(|g| g.name == f.name) {
                return Err(DesignError::DuplicateFactor(f.name.clone()));
            }
        }
        Ok(Self { factors, responses: Vec::new(), codes: Vec::new() })
    }

    pub fn with_capacity(factors: Vec<Factor>, rows: usize) -> Result<Self, DesignError> {
        let mut t = Self::new(factors)?;
        t.responses.reserve(rows);
        t.codes.reserve(rows * t.factors.len());
        Ok(t)
    }

    pub fn push_row(&mut self, response: T, codes: &[usize]) -> Result<(), DesignError> {
        if !response.is_finite() {
            return Err(DesignError::NonFiniteResponse(response.as_f64()));
        }
        if codes.len() != self.factors.len() {
            return Err(DesignError::RowArity { got: codes.len(), want: self.factors.len() });
        }
        for (f, &c) in self.factors.iter().zip(codes) {
            if c >= f.levels.len() {
                return Err(DesignError::LevelOutOfRange { factor: f.name.clone(), code: c, levels: f.levels.len() });
            }
        }
        self.responses.push(response);
        self.codes.extend(codes.iter().map(|&c| c as u32));
        Ok(())
    }

    /// Appends a row given level labels, in factor declaration order.
    pub fn push_labeled(&mut self, response: T, labels: &[&str]) -> Result<(), DesignError> {
        if labels.len() != self.factors.len() {
            return Err(DesignError::RowArity { got: labels.len(), want: self.factors.len() });
        }
        let codes = labels
            .iter()
            .zip(&self.factors)
            .map(|(l, f)| {
                f.level_index(l).ok_or_else(|| DesignError::UnknownLevel {
                    factor: f.name.clone(),
                    level: l.to_string(),
                    valid: f.levels.join(", "),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.push_row(response, &codes)
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn factor_index(&self, name: &str) -> Result<usize, DesignError> {
        self.factors.iter().position(|f| f.name == name).ok_or_else(|| DesignError::UnknownFactor(name.to_string()))
    }

    pub fn factor(&self, name: &str) -> Result<&Factor, DesignError> {
        Ok(&self.factors[self.factor_index(name)?])
    }

    pub fn n_rows(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn responses(&self) -> &[T] {
        &self.responses
    }

    pub fn response(&self, row: usize) -> T {
        self.responses[row]
    }

    pub fn code(&self, row: usize, factor: usize) -> usize {
        self.codes[row * self.factors.len() + factor] as usize
    }

    pub fn row_codes(&self, row: usize) -> &[u32] {
        let k = self.factors.len();
        &self.codes[row * k..(row + 1) * k]
    }

    /// New table with the same factor declarations and the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let k = self.factors.len();
        let mut codes = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            codes.extend_from_slice(self.row_codes(r));
        }
        Self { factors: self.factors.clone(), responses: rows.iter().map(|&r| self.responses[r]).collect(), codes }
    }

    /// Same rows with every response replaced by `f(response)`.
    pub fn map_responses(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            factors: self.factors.clone(),
            responses: self.responses.iter().map(|&y| f(y)).collect(),
            codes: self.codes.clone(),
        }
    }

    /// Order-sensitive fingerprint of the responses and level codes.
    pub fn checksum(&self) -> u64 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for y in &self.responses {
            eat(&y.as_f64().to_bits().to_le_bytes());
        }
        for c in &self.codes {
            eat(&c.to_le_bytes());
        }
        h
    }
}

/// Sparse 0/1 matrix stored by rows (CSR without a value array).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl IndicatorMatrix {
    pub fn from_rows(ncols: usize, rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &c in r {
                assert!(c < ncols, "column {c} out of range");
                col_idx.push(c);
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows: rows.len(), ncols, row_ptr, col_idx }
    }

    /// One entry per row, at column `cols[i]`.
    pub fn from_codes(ncols: usize, cols: impl IntoIterator<Item = usize>) -> Self {
        let col_idx: Vec<usize> = cols.into_iter().inspect(|&c| assert!(c < ncols)).collect();
        Self { nrows: col_idx.len(), ncols, row_ptr: (0..=col_idx.len()).collect(), col_idx }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Column indices holding a 1 in row `i`.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.row(i).contains(&j)
    }

    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.ncols];
        for &c in &self.col_idx {
            counts[c] += 1;
        }
        counts
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let rows: Vec<Vec<usize>> = (0..self.nrows)
            .map(|i| self.row(i).iter().filter_map(|&c| Some(map[c]).filter(|&m| m != usize::MAX)).collect())
            .collect();
        Self::from_rows(keep.len(), &rows)
    }

    pub fn to_dense<T: Real>(&self) -> DenseMatrix<T> {
        let mut m = DenseMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for &c in self.row(i) {
                m[(i, c)] = m[(i, c)] + T::one();
            }
        }
        m
    }

    /// `AᵀA` accumulated from the sparse rows.
    pub fn gram<T: Real>(&self) -> DenseMatrix<T> {
        let mut g = DenseMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows {
            let r = self.row(i);
            for &a in r {
                for &b in r {
                    g[(a, b)] = g[(a, b)] + T::one();
                }
            }
        }
        g
    }
}

/// What a fixed-effect column stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnTerm {
    Intercept,
    Level { factor: String, level: usize, label: String },
}

impl ColumnTerm {
    pub fn label(&self) -> String {
        match self {
            ColumnTerm::Intercept => "intercept".into(),
            ColumnTerm::Level { factor, label, .. } => format!("{factor}:{label}"),
        }
    }

    pub fn factor(&self) -> Option<&str> {
        match self {
            ColumnTerm::Intercept => None,
            ColumnTerm::Level { factor, .. } => Some(factor),
        }
    }
}

/// Random-intercept indicator block for one grouping factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ZBlock {
    pub factor: String,
    pub levels: Vec<String>,
    pub matrix: IndicatorMatrix,
}

/// Response vector, fixed-effect indicator matrix and random-effect blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices<T> {
    pub y: Vec<T>,
    pub x: IndicatorMatrix,
    pub x_terms: Vec<ColumnTerm>,
    pub z_blocks: Vec<ZBlock>,
    pub kept_columns: Vec<usize>,
}

impl<T: Real> DesignMatrices<T> {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn x_labels(&self) -> Vec<String> {
        self.x_terms.iter().map(ColumnTerm::label).collect()
    }

    /// X restricted to the kept (non-aliased) columns.
    pub fn x_kept(&self) -> IndicatorMatrix {
        self.x.select_columns(&self.kept_columns)
    }

    pub fn dropped_columns(&self) -> Vec<usize> {
        (0..self.x.ncols()).filter(|c| !self.kept_columns.contains(c)).collect()
    }

    /// Total random-effect dimension Σ q_k.
    pub fn n_random(&self) -> usize {
        self.z_blocks.iter().map(|b| b.levels.len()).sum()
    }

    /// Horizontal concatenation of the z blocks.
    pub fn z(&self) -> IndicatorMatrix {
        let q = self.n_random();
        let mut rows = vec![Vec::with_capacity(self.z_blocks.len()); self.n_obs()];
        let mut offset = 0;
        for b in &self.z_blocks {
            for (i, row) in rows.iter_mut().enumerate() {
                row.extend(b.matrix.row(i).iter().map(|&c| c + offset));
            }
            offset += b.levels.len();
        }
        IndicatorMatrix::from_rows(q, &rows)
    }
}

pub fn build_design<T: Real>(
    formula: &ModelFormula,
    table: &ObservationTable<T>,
) -> Result<DesignMatrices<T>, DesignError> {
    let fixed_idx = formula.fixed_factors().iter().map(|f| table.factor_index(f)).collect::<Result<Vec<_>, _>>()?;
    let random_idx = formula.random_factors().iter().map(|f| table.factor_index(f)).collect::<Result<Vec<_>, _>>()?;
    if table.is_empty() {
        return Err(DesignError::EmptyTable);
    }

    let mut x_terms = Vec::new();
    if formula.intercept() {
        x_terms.push(ColumnTerm::Intercept);
    }
    let mut offsets = Vec::with_capacity(fixed_idx.len());
    for &fi in &fixed_idx {
        let factor = &table.factors()[fi];
        offsets.push(x_terms.len());
        x_terms.extend(factor.levels.iter().enumerate().map(|(level, label)| ColumnTerm::Level {
            factor: factor.name.clone(),
            level,
            label: label.clone(),
        }));
    }

    let n = table.n_rows();
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut r = Vec::with_capacity(fixed_idx.len() + 1);
            if formula.intercept() {
                r.push(0);
            }
            r.extend(fixed_idx.iter().zip(&offsets).map(|(&fi, &off)| off + table.code(i, fi)));
            r
        })
        .collect();
    let x = IndicatorMatrix::from_rows(x_terms.len(), &rows);

    let z_blocks = random_idx
        .iter()
        .map(|&fi| {
            let factor = &table.factors()[fi];
            ZBlock {
                factor: factor.name.clone(),
                levels: factor.levels.clone(),
                matrix: IndicatorMatrix::from_codes(factor.levels.len(), (0..n).map(|i| table.code(i, fi))),
            }
        })
        .collect();

    let kept_columns = detect_aliasing(&x);
    Ok(DesignMatrices { y: table.responses().to_vec(), x, x_terms, z_blocks, kept_columns })
}

/// Greedy left-to-right maximal set of linearly independent columns of `x`.
///
/// Columns whose residual pivot (against the columns already kept) is below
/// [`ALIASING_TOLERANCE`] times the largest column norm are dropped; all-zero
/// columns are always dropped.
pub fn detect_aliasing(x: &IndicatorMatrix) -> Vec<usize> {
    independent_columns(&x.gram::<f64>(), ALIASING_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    fn two_by_two() -> ObservationTable<f64> {
        let mut t =
            ObservationTable::new(vec![Factor::new("a", ["a1", "a2"]), Factor::new("b", ["b1", "b2"])]).unwrap();
        for (y, a, b) in [(1.0, 0, 0), (2.0, 0, 1), (3.0, 1, 0), (4.0, 1, 1)] {
            t.push_row(y, &[a, b]).unwrap();
        }
        t
    }

    #[test]
    fn intercept_only_design() {
        let mut t = ObservationTable::new(vec![Factor::new("g", ["x"])]).unwrap();
        for y in [1.0, 2.0, 4.0] {
            t.push_row(y, &[0]).unwrap();
        }
        let d = build_design(&parse_formula("y ~ 1").unwrap(), &t).unwrap();
        assert_eq!((d.x.nrows(), d.x.ncols()), (3, 1));
        assert!((0..3).all(|i| d.x.row(i) == [0]));
        assert!(d.z_blocks.is_empty());
        assert_eq!(d.y, vec![1.0, 2.0, 4.0]);
        assert_eq!(d.x_labels(), vec!["intercept"]);
    }

    #[test]
    fn two_crossed_fixed_factors_alias_one_column() {
        let d = build_design(&parse_formula("y ~ -1 + a + b").unwrap(), &two_by_two()).unwrap();
        assert_eq!((d.x.nrows(), d.x.ncols()), (4, 4));
        assert!((0..4).all(|i| d.x.row(i).len() == 2));
        // a1 + a2 = b1 + b2, so b2 is the first dependent column from the left.
        assert_eq!(d.kept_columns, vec![0, 1, 2]);
        assert_eq!(d.dropped_columns(), vec![3]);
        assert_eq!(d.x_labels()[3], "b:b2");
    }

    #[test]
    fn single_fixed_factor_rows_sum_to_one() {
        let d = build_design(&parse_formula("y ~ -1 + a + (1|b)").unwrap(), &two_by_two()).unwrap();
        assert!((0..4).all(|i| d.x.row(i).len() == 1));
        assert_eq!(d.kept_columns, vec![0, 1]);
        assert_eq!(d.z_blocks.len(), 1);
        assert_eq!(d.z_blocks[0].matrix.ncols(), 2);
        assert!((0..4).all(|i| d.z_blocks[0].matrix.row(i).len() == 1));
    }

    #[test]
    fn aliasing_examples() {
        let eye = IndicatorMatrix::from_rows(3, &[vec![0], vec![1], vec![2]]);
        assert_eq!(detect_aliasing(&eye), vec![0, 1, 2]);

        // [ones | indicator of a two-level factor]
        let x = IndicatorMatrix::from_rows(3, &[vec![0, 1], vec![0, 1], vec![0, 2], vec![0, 2]]);
        assert_eq!(detect_aliasing(&x), vec![0, 1]);

        let dup = IndicatorMatrix::from_rows(3, &[vec![0, 1, 2], vec![1, 2], vec![0]]);
        // columns 1 and 2 are identical
        assert_eq!(detect_aliasing(&dup), vec![0, 1]);

        let zero = IndicatorMatrix::from_rows(2, &[vec![], vec![]]);
        assert!(detect_aliasing(&zero).is_empty());
    }

    #[test]
    fn unobserved_level_is_aliased() {
        let mut t = ObservationTable::new(vec![Factor::new("a", ["p", "q", "r"])]).unwrap();
        t.push_row(1.0, &[0]).unwrap();
        t.push_row(2.0, &[2]).unwrap();
        let d = build_design(&parse_formula("y ~ -1 + a").unwrap(), &t).unwrap();
        assert_eq!(d.kept_columns, vec![0, 2]);
    }

    #[test]
    fn errors() {
        let t = two_by_two();
        assert_eq!(build_design(&parse_formula("y ~ c").unwrap(), &t), Err(DesignError::UnknownFactor("c".into())));
        let empty = ObservationTable::<f64>::new(vec![Factor::new("a", ["x"])]).unwrap();
        assert_eq!(build_design(&parse_formula("y ~ a").unwrap(), &empty), Err(DesignError::EmptyTable));
        let mut t = two_by_two();
        assert!(matches!(t.push_row(1.0, &[2, 0]), Err(DesignError::LevelOutOfRange { .. })));
        assert!(matches!(t.push_row(f64::NAN, &[0, 0]), Err(DesignError::NonFiniteResponse(_))));
        assert!(matches!(t.push_row(1.0, &[0]), Err(DesignError::RowArity { .. })));
    }

    #[test]
    fn concatenated_z() {
        let d = build_design(&parse_formula("y ~ 1 + (1|a) + (1|b)").unwrap(), &two_by_two()).unwrap();
        let z = d.z();
        assert_eq!(z.ncols(), 4);
        assert_eq!(z.row(1), &[0, 3]);
        assert_eq!(z.row(2), &[1, 2]);
    }
}
