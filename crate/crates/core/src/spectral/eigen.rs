//! Dense symmetric eigensolver: Householder reduction to tridiagonal form
//! followed by the implicit QL iteration with Wilkinson-style shifts.

use ndarray::{Array1, Array2};

use super::SpectralError;

/// Ascending eigenvalues with eigenvectors stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    pub eigenvalues: Array1<f64>,
    pub eigenvectors: Array2<f64>,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `max_j |A y_j - lambda_j y_j|_inf`.
    pub fn max_residual(&self, a: &Array2<f64>) -> f64 {
        let product = a.dot(&self.eigenvectors);
        let mut worst = 0.0f64;
        for (j, &lambda) in self.eigenvalues.iter().enumerate() {
            for i in 0..a.nrows() {
                worst = worst.max((product[[i, j]] - lambda * self.eigenvectors[[i, j]]).abs());
            }
        }
        worst
    }

    /// `max |Y^T Y - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.eigenvectors.t().dot(&self.eigenvectors);
        let mut worst = 0.0f64;
        for ((i, j), &v) in gram.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }
}

/// Tolerance for the symmetry precondition, scaled by the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Flips `v` so its first component with magnitude above `1e-12` is positive.
pub fn canonical_sign(v: &mut [f64]) {
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// The `m` algebraically smallest eigenpairs of a symmetric matrix, ascending.
pub fn eigendecompose(a: &Array2<f64>, m: usize) -> Result<EigenBasis, SpectralError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(SpectralError::ShapeMismatch(format!("matrix is {:?}, expected square", a.dim())));
    }
    if m == 0 || m > n {
        return Err(SpectralError::InvalidArgument(format!("requested {m} eigenpairs of a {n}x{n} matrix")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidArgument("matrix has non-finite entries".into()));
    }
    let scale = a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for i in 0..n {
        for j in i + 1..n {
            let gap = (a[[i, j]] - a[[j, i]]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(SpectralError::NotSymmetric { row: i, col: j, gap });
            }
        }
    }

    // symmetrize from the lower triangle
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if j <= i { a[[i, j]] } else { a[[j, i]] }).collect()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    ql_implicit(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| d[x].total_cmp(&d[y]).then(x.cmp(&y)));
    let mut eigenvalues = Array1::zeros(m);
    let mut eigenvectors = Array2::zeros((n, m));
    for (col, &src) in order.iter().take(m).enumerate() {
        eigenvalues[col] = d[src];
        let mut vec: Vec<f64> = (0..n).map(|k| v[k][src]).collect();
        canonical_sign(&mut vec);
        for (k, x) in vec.into_iter().enumerate() {
            eigenvectors[[k, col]] = x;
        }
    }
    Ok(EigenBasis { eigenvalues, eigenvectors })
}

/// Householder reduction of the symmetric matrix held in `v`.
///
/// On return `d` holds the diagonal, `e[1..]` the subdiagonal and `v` the
/// accumulated orthogonal transformation.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1][..n]);
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal `(d, e)`, rotating the columns of `v`.
fn ql_implicit(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<(), SpectralError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let max_sweeps = 60 * n.max(1);
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > f64::EPSILON * tst1 {
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > max_sweeps {
                    return Err(SpectralError::NoConvergence { index: l, sweeps: max_sweeps });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= f64::EPSILON * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}
