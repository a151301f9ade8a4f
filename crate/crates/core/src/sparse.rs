//! Compressed-row sparsity patterns shared by adjacency operators and
//! learned latent graphs.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Row-compressed sparsity pattern of an `n_rows × n_cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsrPattern {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl CsrPattern {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::input(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if row_offsets[0] != 0 || row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::input("row_offsets must start at 0 and be non-decreasing"));
        }
        if row_offsets[n_rows] != col_indices.len() {
            return Err(Error::input("row_offsets[n] must equal the number of stored entries"));
        }
        if let Some(&bad) = col_indices.iter().find(|&&c| c >= n_cols) {
            return Err(Error::input(format!("column index {bad} out of range {n_cols}")));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
        })
    }

    /// Builds a pattern from per-row column lists, keeping the given order.
    pub fn from_rows(n_cols: usize, rows: &[Vec<usize>]) -> Result<Self> {
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for r in rows {
            col_indices.extend_from_slice(r);
            row_offsets.push(col_indices.len());
        }
        Self::new(rows.len(), n_cols, row_offsets, col_indices)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[r]..self.row_offsets[r + 1]]
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_offsets[r]..self.row_offsets[r + 1]
    }

    /// Row index of every stored entry, in storage order.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            out.extend(std::iter::repeat_n(r, self.row_offsets[r + 1] - self.row_offsets[r]));
        }
        out
    }
}

/// A sparse matrix: shared pattern plus one value per stored entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub pattern: Arc<CsrPattern>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(pattern: Arc<CsrPattern>, values: Vec<f64>) -> Result<Self> {
        if values.len() != pattern.nnz() {
            return Err(Error::input(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                pattern.nnz()
            )));
        }
        Ok(Self { pattern, values })
    }

    /// Mean-aggregation operator: every stored entry of row `r` gets `1/deg(r)`.
    /// Empty rows stay empty.
    pub fn row_mean(pattern: Arc<CsrPattern>) -> Self {
        let mut values = Vec::with_capacity(pattern.nnz());
        for r in 0..pattern.n_rows() {
            let deg = pattern.row(r).len();
            values.extend(std::iter::repeat_n(1.0 / deg as f64, deg));
        }
        Self { pattern, values }
    }

    pub fn identity(n: usize) -> Self {
        let pattern = CsrPattern::new(n, n, (0..=n).collect(), (0..n).collect())
            .expect("identity pattern is valid");
        Self {
            pattern: Arc::new(pattern),
            values: vec![1.0; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_offsets() {
        assert!(CsrPattern::new(2, 2, vec![0, 2, 1], vec![0]).is_err());
        assert!(CsrPattern::new(2, 2, vec![0, 1, 1], vec![2]).is_err());
        assert!(CsrPattern::new(2, 2, vec![0, 1], vec![0]).is_err());
    }

    #[test]
    fn row_mean_weights() {
        let p = CsrPattern::from_rows(3, &[vec![1, 2], vec![], vec![0]]).unwrap();
        let m = SparseMatrix::row_mean(Arc::new(p));
        assert_eq!(m.values, vec![0.5, 0.5, 1.0]);
        assert_eq!(m.pattern.entry_rows(), vec![0, 0, 2]);
    }
}
