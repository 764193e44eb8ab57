use serde::{Deserialize, Serialize};

use super::{Dense, ShapeError};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from per-row `(column, value)` lists. Columns are sorted;
    /// duplicate columns within a row are rejected.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self, ShapeError> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|&(c, _)| c);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(ShapeError::new(
                        "Csr::from_rows",
                        "unique columns per row".to_string(),
                        format!("duplicate column {} in row {r}", w[0].0),
                    ));
                }
            }
            for (c, v) in row {
                if c >= cols {
                    return Err(ShapeError::new(
                        "Csr::from_rows",
                        format!("column < {cols}"),
                        format!("column {c} in row {r}"),
                    ));
                }
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows: indptr.len() - 1,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn row_iter(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (c, v) = self.row(r);
        c.iter().copied().zip(v.iter().copied())
    }

    /// Entry lookup; absent entries read as zero.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |i| vals[i])
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().sum()
    }

    /// `self · rhs`
    pub fn matmul_dense(&self, rhs: &Dense) -> Result<Dense, ShapeError> {
        if self.cols != rhs.rows() {
            return Err(ShapeError::new(
                "Csr::matmul_dense",
                format!("rhs rows {}", self.cols),
                format!("rhs rows {}", rhs.rows()),
            ));
        }
        let mut out = Dense::zeros(self.rows, rhs.cols());
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            for (c, v) in self.row_iter(r) {
                for (d, &x) in dst.iter_mut().zip(rhs.row(c)) {
                    *d += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul_dense(&self, rhs: &Dense) -> Result<Dense, ShapeError> {
        if self.rows != rhs.rows() {
            return Err(ShapeError::new(
                "Csr::t_matmul_dense",
                format!("rhs rows {}", self.rows),
                format!("rhs rows {}", rhs.rows()),
            ));
        }
        let mut out = Dense::zeros(self.cols, rhs.cols());
        for r in 0..self.rows {
            let src = rhs.row(r);
            for (c, v) in self.row_iter(r) {
                for (d, &x) in out.row_mut(c).iter_mut().zip(src) {
                    *d += v * x;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Csr {
        let mut rows = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                rows[c].push((r, v));
            }
        }
        Csr::from_rows(self.rows, rows).expect("transpose of a valid matrix is valid")
    }

    pub fn to_dense(&self) -> Dense {
        let mut out = Dense::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_iter(r) {
                out.set(r, c, v);
            }
        }
        out
    }
}
