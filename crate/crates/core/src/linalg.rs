//! Small dense helpers for the element-sized matrices used by the filter and
//! the vertical projections. Nothing here is meant for large systems.

/// Row-major dense square matrix solve with partial pivoting.
/// `a` is `n*n`, `b` holds `nrhs` right-hand sides column-interleaved as `n*nrhs` (row-major).
pub(crate) fn solve_dense(a: &[f64], n: usize, b: &[f64], nrhs: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            for k in 0..nrhs {
                x.swap(col * nrhs + k, piv * nrhs + k);
            }
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            for k in 0..nrhs {
                x[row * nrhs + k] -= f * x[col * nrhs + k];
            }
        }
    }
    for col in (0..n).rev() {
        let d = m[col * n + col];
        for k in 0..nrhs {
            let mut s = x[col * nrhs + k];
            for j in col + 1..n {
                s -= m[col * n + j] * x[j * nrhs + k];
            }
            x[col * nrhs + k] = s / d;
        }
    }
    Some(x)
}

/// Inverse of a small dense matrix.
pub(crate) fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    solve_dense(a, n, &eye, n)
}

/// `c = a * b` with `a` (m x k) and `b` (k x n), row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    c
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_small_matrix() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let inv = invert(&a, 3).unwrap();
        let id = matmul(&a, &inv, 3, 3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((id[i * 3 + j] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        assert!(invert(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }
}
