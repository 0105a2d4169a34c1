//! Compressed sparse matrices and the dense adapter used for `X`.
//!
//! A [`SparseMatrix`] keeps the three classic arrays (`indptr`, `indices`,
//! `values`) plus an [`Orientation`] flag. Row-major data is the usual CSR
//! layout of h5ad files; column-major data (CSC) is kept as-is and only
//! transposed once, when the store is built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed sparse structure: {0}")]
    Malformed(String),
}

/// Which axis the compressed (`indptr`) dimension runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    /// CSR: `indptr` has `n_rows + 1` entries, `indices` are column indices.
    RowMajor,
    /// CSC: `indptr` has `n_cols + 1` entries, `indices` are row indices.
    ColumnMajor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    orientation: Orientation,
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<u64>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Validates the raw arrays and brings every major slice into canonical
    /// form: minor indices strictly increasing, duplicates summed.
    pub fn from_parts(
        orientation: Orientation,
        n_rows: usize,
        n_cols: usize,
        indptr: Vec<u64>,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self, SparseError> {
        let (n_major, n_minor) = match orientation {
            Orientation::RowMajor => (n_rows, n_cols),
            Orientation::ColumnMajor => (n_cols, n_rows),
        };
        if n_minor > u32::MAX as usize {
            return Err(SparseError::Malformed(format!(
                "minor dimension {n_minor} exceeds 32-bit index range"
            )));
        }
        if indptr.len() != n_major + 1 {
            return Err(SparseError::Malformed(format!(
                "indptr has {} entries, expected {}",
                indptr.len(),
                n_major + 1
            )));
        }
        if indptr[0] != 0 {
            return Err(SparseError::Malformed("indptr[0] must be 0".into()));
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(SparseError::Malformed("indptr is not non-decreasing".into()));
        }
        let nnz = indptr[n_major] as usize;
        if nnz != indices.len() || nnz != values.len() {
            return Err(SparseError::Malformed(format!(
                "indptr ends at {nnz} but indices/values have {}/{} entries",
                indices.len(),
                values.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= n_minor) {
            return Err(SparseError::Malformed(format!(
                "index {bad} out of range for minor dimension {n_minor}"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(SparseError::Malformed(format!("non-finite value {v}")));
        }

        let mut m = SparseMatrix {
            orientation,
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        };
        m.canonicalize();
        Ok(m)
    }

    /// An all-zero matrix.
    pub fn zeros(orientation: Orientation, n_rows: usize, n_cols: usize) -> Self {
        let n_major = match orientation {
            Orientation::RowMajor => n_rows,
            Orientation::ColumnMajor => n_cols,
        };
        SparseMatrix {
            orientation,
            n_rows,
            n_cols,
            indptr: vec![0; n_major + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    fn is_canonical(&self) -> bool {
        self.indptr.windows(2).all(|w| {
            let s = &self.indices[w[0] as usize..w[1] as usize];
            s.windows(2).all(|p| p[0] < p[1])
        })
    }

    fn canonicalize(&mut self) {
        if self.is_canonical() {
            return;
        }
        let mut new_ptr = Vec::with_capacity(self.indptr.len());
        let mut new_idx = Vec::with_capacity(self.indices.len());
        let mut new_val = Vec::with_capacity(self.values.len());
        new_ptr.push(0u64);
        let mut scratch: Vec<(u32, f64)> = Vec::new();
        for w in self.indptr.windows(2) {
            let (lo, hi) = (w[0] as usize, w[1] as usize);
            scratch.clear();
            scratch.extend(
                self.indices[lo..hi]
                    .iter()
                    .copied()
                    .zip(self.values[lo..hi].iter().copied()),
            );
            // stable sort keeps duplicate summation order equal to file order
            scratch.sort_by_key(|&(i, _)| i);
            for &(i, v) in &scratch {
                if new_idx.len() > *new_ptr.last().unwrap() as usize
                    && *new_idx.last().unwrap() == i
                {
                    *new_val.last_mut().unwrap() += v;
                } else {
                    new_idx.push(i);
                    new_val.push(v);
                }
            }
            new_ptr.push(new_idx.len() as u64);
        }
        self.indptr = new_ptr;
        self.indices = new_idx;
        self.values = new_val;
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[u64] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Minor indices and values of one major slice (a row for CSR, a
    /// column for CSC).
    pub fn major_slice(&self, major: usize) -> Result<(&[u32], &[f64]), SparseError> {
        let n_major = self.indptr.len() - 1;
        if major >= n_major {
            return Err(SparseError::IndexOutOfRange {
                index: major,
                len: n_major,
            });
        }
        let lo = self.indptr[major] as usize;
        let hi = self.indptr[major + 1] as usize;
        Ok((&self.indices[lo..hi], &self.values[lo..hi]))
    }

    /// Dense copy of one row, reconstructed from the compressed arrays.
    pub fn get_row(&self, row: usize) -> Result<Vec<f64>, SparseError> {
        if row >= self.n_rows {
            return Err(SparseError::IndexOutOfRange {
                index: row,
                len: self.n_rows,
            });
        }
        let mut out = vec![0.0; self.n_cols];
        match self.orientation {
            Orientation::RowMajor => {
                let (idx, val) = self.major_slice(row)?;
                for (&c, &v) in idx.iter().zip(val) {
                    out[c as usize] = v;
                }
            }
            Orientation::ColumnMajor => {
                let r = row as u32;
                for (col, slot) in out.iter_mut().enumerate() {
                    let (idx, val) = self.major_slice(col)?;
                    if let Ok(k) = idx.binary_search(&r) {
                        *slot = val[k];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Calls `f(col, value)` for each stored entry of `row` in increasing
    /// column order.
    pub fn for_each_in_row(
        &self,
        row: usize,
        mut f: impl FnMut(usize, f64),
    ) -> Result<(), SparseError> {
        match self.orientation {
            Orientation::RowMajor => {
                let (idx, val) = self.major_slice(row)?;
                for (&c, &v) in idx.iter().zip(val) {
                    f(c as usize, v);
                }
                Ok(())
            }
            Orientation::ColumnMajor => {
                for (c, v) in self.get_row(row)?.into_iter().enumerate() {
                    if v != 0.0 {
                        f(c, v);
                    }
                }
                Ok(())
            }
        }
    }
}

/// Row-major dense matrix exposing the same row API as [`SparseMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(n_rows: usize, n_cols: usize, values: Vec<f64>) -> Result<Self, SparseError> {
        if values.len() != n_rows * n_cols {
            return Err(SparseError::Malformed(format!(
                "dense buffer has {} values, expected {}x{}",
                values.len(),
                n_rows,
                n_cols
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(SparseError::Malformed(format!("non-finite value {v}")));
        }
        Ok(DenseMatrix {
            n_rows,
            n_cols,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, row: usize) -> Result<&[f64], SparseError> {
        if row >= self.n_rows {
            return Err(SparseError::IndexOutOfRange {
                index: row,
                len: self.n_rows,
            });
        }
        Ok(&self.values[row * self.n_cols..(row + 1) * self.n_cols])
    }
}

/// The expression matrix `X`, cells × genes.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpressionMatrix {
    Sparse(SparseMatrix),
    Dense(DenseMatrix),
}

impl ExpressionMatrix {
    pub fn n_rows(&self) -> usize {
        match self {
            ExpressionMatrix::Sparse(m) => m.n_rows(),
            ExpressionMatrix::Dense(m) => m.n_rows(),
        }
    }

    pub fn n_cols(&self) -> usize {
        match self {
            ExpressionMatrix::Sparse(m) => m.n_cols(),
            ExpressionMatrix::Dense(m) => m.n_cols(),
        }
    }

    pub fn get_row(&self, row: usize) -> Result<Vec<f64>, SparseError> {
        match self {
            ExpressionMatrix::Sparse(m) => m.get_row(row),
            ExpressionMatrix::Dense(m) => m.row(row).map(<[f64]>::to_vec),
        }
    }

    /// Number of stored entries that are not zero.
    pub fn count_nonzero(&self) -> usize {
        match self {
            ExpressionMatrix::Sparse(m) => m.values().iter().filter(|v| **v != 0.0).count(),
            ExpressionMatrix::Dense(m) => m.values.iter().filter(|v| **v != 0.0).count(),
        }
    }
}

impl From<SparseMatrix> for ExpressionMatrix {
    fn from(m: SparseMatrix) -> Self {
        ExpressionMatrix::Sparse(m)
    }
}

impl From<DenseMatrix> for ExpressionMatrix {
    fn from(m: DenseMatrix) -> Self {
        ExpressionMatrix::Dense(m)
    }
}

/// Compresses a dense row-major buffer into canonical CSR.
pub fn csr_from_dense(n_rows: usize, n_cols: usize, dense: &[f64]) -> SparseMatrix {
    assert_eq!(dense.len(), n_rows * n_cols);
    let mut indptr = Vec::with_capacity(n_rows + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for row in dense.chunks(n_cols.max(1)).take(n_rows) {
        for (c, &v) in row.iter().enumerate() {
            if v != 0.0 {
                indices.push(c as u32);
                values.push(v);
            }
        }
        indptr.push(indices.len() as u64);
    }
    if n_cols == 0 {
        indptr.resize(n_rows + 1, 0);
    }
    SparseMatrix {
        orientation: Orientation::RowMajor,
        n_rows,
        n_cols,
        indptr,
        indices,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn example() -> SparseMatrix {
        SparseMatrix::from_parts(
            Orientation::RowMajor,
            2,
            3,
            vec![0, 2, 3],
            vec![0, 2, 1],
            vec![5.0, 7.0, 9.0],
        )
        .unwrap()
    }

    #[test]
    fn get_row_places_values() {
        let m = example();
        assert_eq!(m.get_row(0).unwrap(), vec![5.0, 0.0, 7.0]);
        assert_eq!(m.get_row(1).unwrap(), vec![0.0, 9.0, 0.0]);
        assert_eq!(
            m.get_row(2),
            Err(SparseError::IndexOutOfRange { index: 2, len: 2 })
        );
    }

    #[test]
    fn csc_rows_match_csr_rows() {
        // same matrix stored column-major
        let csc = SparseMatrix::from_parts(
            Orientation::ColumnMajor,
            2,
            3,
            vec![0, 1, 2, 3],
            vec![0, 1, 0],
            vec![5.0, 9.0, 7.0],
        )
        .unwrap();
        let csr = example();
        for r in 0..2 {
            assert_eq!(csc.get_row(r).unwrap(), csr.get_row(r).unwrap());
        }
    }

    #[test]
    fn unsorted_rows_are_sorted_and_duplicates_summed() {
        let m = SparseMatrix::from_parts(
            Orientation::RowMajor,
            1,
            4,
            vec![0, 4],
            vec![3, 1, 3, 0],
            vec![1.0, 2.0, 4.0, 8.0],
        )
        .unwrap();
        assert_eq!(m.indices(), &[0, 1, 3]);
        assert_eq!(m.values(), &[8.0, 2.0, 5.0]);
        assert_eq!(m.indptr(), &[0, 3]);
    }

    #[test]
    fn rejects_bad_structure() {
        let bad_ptr = SparseMatrix::from_parts(
            Orientation::RowMajor,
            2,
            3,
            vec![0, 2, 1],
            vec![0],
            vec![1.0],
        );
        assert!(matches!(bad_ptr, Err(SparseError::Malformed(_))));
        let bad_idx = SparseMatrix::from_parts(
            Orientation::RowMajor,
            1,
            3,
            vec![0, 1],
            vec![3],
            vec![1.0],
        );
        assert!(matches!(bad_idx, Err(SparseError::Malformed(_))));
        let bad_len =
            SparseMatrix::from_parts(Orientation::RowMajor, 1, 3, vec![0, 2], vec![0], vec![1.0]);
        assert!(matches!(bad_len, Err(SparseError::Malformed(_))));
    }

    #[test]
    fn dense_adapter_rows() {
        let d = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let x = ExpressionMatrix::from(d);
        assert_eq!(x.get_row(1).unwrap(), vec![0.0, 3.0]);
        assert!(x.get_row(2).is_err());
        assert_eq!(x.count_nonzero(), 2);
    }

    fn sparse_dense() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
            let cell = prop_oneof![3 => Just(0.0), 1 => (1u32..1000).prop_map(|v| v as f64 / 8.0)];
            (Just(r), Just(c), proptest::collection::vec(cell, r * c))
        })
    }

    proptest! {
        #[test]
        fn row_sums_are_exact((r, c, dense) in sparse_dense()) {
            let m = csr_from_dense(r, c, &dense);
            for row in 0..r {
                let (_, vals) = m.major_slice(row).unwrap();
                let stored: f64 = vals.iter().sum();
                let dense_sum: f64 = m.get_row(row).unwrap().iter().sum();
                prop_assert_eq!(stored, dense_sum);
            }
        }

        #[test]
        fn densify_then_resparsify_is_identity((r, c, dense) in sparse_dense()) {
            let m = csr_from_dense(r, c, &dense);
            let mut again = Vec::with_capacity(r * c);
            for row in 0..r {
                again.extend(m.get_row(row).unwrap());
            }
            let m2 = csr_from_dense(r, c, &again);
            prop_assert_eq!(&m, &m2);
            let rebuilt = SparseMatrix::from_parts(
                Orientation::RowMajor, r, c,
                m.indptr().to_vec(), m.indices().to_vec(), m.values().to_vec(),
            ).unwrap();
            prop_assert_eq!(rebuilt, m);
        }
    }
}
