//! Dense kernels behind the tape's factorization and triangular-solve nodes.

use super::tape::Mat;

/// Lower Cholesky factor, or `None` if `a` is not numerically positive definite.
pub fn cholesky(a: &Mat) -> Option<Mat> {
    let n = a.nrows();
    if n != a.ncols() {
        return None;
    }
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// `L⁻¹ B` by forward substitution, column by column.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    assert_eq!(n, b.nrows(), "solve_lower: dimension mismatch");
    let mut x = b.clone();
    let ls = l.as_slice();
    for c in 0..x.ncols() {
        let col = x.column_mut(c);
        let xs = col.data.into_slice_mut();
        for j in 0..n {
            let xj = xs[j] / ls[j * n + j];
            xs[j] = xj;
            if xj != 0.0 {
                let lcol = &ls[j * n + j + 1..(j + 1) * n];
                for (xi, lij) in xs[j + 1..].iter_mut().zip(lcol) {
                    *xi -= xj * lij;
                }
            }
        }
    }
    x
}

/// `L⁻ᵀ B` by back substitution.
pub fn solve_lower_t(l: &Mat, b: &Mat) -> Mat {
    let n = l.nrows();
    assert_eq!(n, b.nrows(), "solve_lower_t: dimension mismatch");
    let mut x = b.clone();
    let ls = l.as_slice();
    for c in 0..x.ncols() {
        let col = x.column_mut(c);
        let xs = col.data.into_slice_mut();
        for j in (0..n).rev() {
            let lcol = &ls[j * n + j + 1..(j + 1) * n];
            let dot: f64 = lcol.iter().zip(&xs[j + 1..]).map(|(a, b)| a * b).sum();
            xs[j] = (xs[j] - dot) / ls[j * n + j];
        }
    }
    x
}
