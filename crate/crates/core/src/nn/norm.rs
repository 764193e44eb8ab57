use super::dense::{dot, l2};
use super::Dense;

/// Scales every nonzero row to unit L2 norm. Zero rows stay zero.
pub fn normalize_rows(h: &Dense) -> Dense {
    let mut out = h.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = l2(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Vector-Jacobian product of [`normalize_rows`] at `raw`:
/// `(g - y (y·g)) / ‖x‖` per row, with `y = x / ‖x‖`. Zero rows pass no gradient.
pub fn normalize_rows_backward(raw: &Dense, g: &Dense) -> Dense {
    let mut out = Dense::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let x = raw.row(r);
        let n = l2(x);
        if n == 0.0 {
            continue;
        }
        let gr = g.row(r);
        let yg = dot(x, gr) / n;
        for ((o, &xv), &gv) in out.row_mut(r).iter_mut().zip(x).zip(gr) {
            *o = (gv - (xv / n) * yg) / n;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let h = Dense::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let n = normalize_rows(&h);
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn idempotent() {
        let h = Dense::from_rows(&[vec![0.3, -7.0, 2.5], vec![1e-3, 2e-3, 0.0]]).unwrap();
        let once = normalize_rows(&h);
        let twice = normalize_rows(&once);
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = Dense::from_rows(&[vec![0.7, -1.3, 0.4]]).unwrap();
        let g = Dense::from_rows(&[vec![0.2, 0.5, -1.0]]).unwrap();
        let analytic = normalize_rows_backward(&x, &g);
        let f = |x: &Dense| dot(normalize_rows(x).row(0), g.row(0));
        let h = 1e-6;
        for j in 0..3 {
            let mut p = x.clone();
            p.set(0, j, x.get(0, j) + h);
            let mut m = x.clone();
            m.set(0, j, x.get(0, j) - h);
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic.get(0, j)).abs() < 1e-8);
        }
    }
}
