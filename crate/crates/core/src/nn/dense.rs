use serde::{Deserialize, Serialize};

use super::ShapeError;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::new(
                "Dense::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(ShapeError::new(
                    "Dense::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |r| self.row(r))
    }

    /// Gathers the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Dense {
        let mut out = Dense::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    fn check_same_shape(&self, other: &Dense, op: &'static str) -> Result<(), ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::new(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Dense) -> Result<Dense, ShapeError> {
        if self.cols != other.rows {
            return Err(ShapeError::new(
                "matmul",
                format!("lhs cols {} == rhs rows", self.cols),
                format!("rhs rows {}", other.rows),
            ));
        }
        let mut out = Dense::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += aik * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Dense) -> Result<Dense, ShapeError> {
        if self.rows != other.rows {
            return Err(ShapeError::new(
                "t_matmul",
                format!("lhs rows {} == rhs rows", self.rows),
                format!("rhs rows {}", other.rows),
            ));
        }
        let mut out = Dense::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bv) in dst.iter_mut().zip(b) {
                    *d += aki * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Dense) -> Result<Dense, ShapeError> {
        if self.cols != other.cols {
            return Err(ShapeError::new(
                "matmul_t",
                format!("lhs cols {} == rhs cols", self.cols),
                format!("rhs cols {}", other.cols),
            ));
        }
        let mut out = Dense::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Dense) -> Result<Dense, ShapeError> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Dense) -> Result<Dense, ShapeError> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Dense) -> Result<(), ShapeError> {
        self.axpy(1.0, other)
    }

    /// `self += alpha · x`
    pub fn axpy(&mut self, alpha: f64, x: &Dense) -> Result<(), ShapeError> {
        self.check_same_shape(x, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Dense {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn hadamard(&self, other: &Dense) -> Result<Dense, ShapeError> {
        self.check_same_shape(other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Dense {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        Dense {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in each row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(Self::argmax_row).collect()
    }

    pub(crate) fn argmax_row(row: &[f64]) -> usize {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Stacked L2 norm over a list of matrices, i.e. the norm of their concatenation.
pub fn stacked_norm(mats: &[Dense]) -> f64 {
    mats.iter()
        .map(|m| m.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Stacked L2 norm of `a - b`. Panics when the two lists disagree in shape.
pub fn stacked_distance(a: &[Dense], b: &[Dense]) -> f64 {
    assert_eq!(a.len(), b.len(), "stacked_distance: layer count differs");
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.shape(), y.shape(), "stacked_distance: shape differs");
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Dense {
        Dense::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_variants_agree() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let b = m(&[&[1.0, 0.5, -1.0], &[2.0, 0.0, 1.0]]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab, m(&[&[5.0, 0.5, 1.0], &[11.0, 1.5, 1.0], &[17.0, 2.5, 1.0]]));

        // aᵀ·c via t_matmul vs explicit transpose
        let c = m(&[&[1.0], &[0.0], &[2.0]]);
        assert_eq!(a.t_matmul(&c).unwrap(), m(&[&[11.0], &[14.0]]));

        let bt = m(&[&[1.0, 2.0], &[0.5, 0.0], &[-1.0, 1.0]]);
        assert_eq!(a.matmul_t(&bt).unwrap(), ab);
    }

    #[test]
    fn shape_errors() {
        let a = Dense::zeros(2, 3);
        assert!(a.matmul(&Dense::zeros(2, 3)).is_err());
        assert!(a.add(&Dense::zeros(3, 2)).is_err());
        assert!(Dense::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Dense::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn zero_sized_matrices() {
        let a = Dense::zeros(3, 0);
        let b = Dense::zeros(0, 4);
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.shape(), (3, 4));
        assert_eq!(p.max_abs(), 0.0);
        assert_eq!(a.iter_rows().count(), 3);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let a = m(&[&[1.0, 1.0, 0.0], &[0.0, 2.0, 3.0]]);
        assert_eq!(a.argmax_rows(), vec![0, 2]);
    }
}
