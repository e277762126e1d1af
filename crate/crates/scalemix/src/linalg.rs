//! Minimal dense symmetric linear algebra: Cholesky factorization, triangular
//! solves, and inversion. Matrices are flat row-major `Vec<f64>`.

/// Cholesky factorization A = L Lᵀ. Returns the lower factor, or `None` if a
/// nonpositive pivot is encountered.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solve L x = b (forward substitution).
pub fn solve_lower(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            x[i] -= l[i * d + k] * x[k];
        }
        x[i] /= l[i * d + i];
    }
    x
}

/// Solve Lᵀ x = b (back substitution).
pub fn solve_lower_t(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..d).rev() {
        for k in i + 1..d {
            x[i] -= l[k * d + i] * x[k];
        }
        x[i] /= l[i * d + i];
    }
    x
}

/// Solve A x = b given the Cholesky factor of A.
pub fn chol_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    solve_lower_t(l, d, &solve_lower(l, d, b))
}

/// Inverse of A from its Cholesky factor.
pub fn chol_inverse(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut e = vec![0.0; d];
    for j in 0..d {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = chol_solve(l, d, &e);
        for i in 0..d {
            inv[i * d + j] = col[i];
        }
    }
    // Symmetrize against rounding.
    for i in 0..d {
        for j in 0..i {
            let m = 0.5 * (inv[i * d + j] + inv[j * d + i]);
            inv[i * d + j] = m;
            inv[j * d + i] = m;
        }
    }
    inv
}

/// log |A| from the Cholesky factor of A.
pub fn chol_log_det(l: &[f64], d: usize) -> f64 {
    (0..d).map(|i| l[i * d + i].ln()).sum::<f64>() * 2.0
}

/// Quadratic form xᵀ A x for symmetric flat A.
pub fn quad_form(a: &[f64], d: usize, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += a[i * d + j] * x[j];
        }
        total += x[i] * row;
    }
    total
}

/// y = A x for flat A.
pub fn mat_vec(a: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * x[j]).sum())
        .collect()
}
