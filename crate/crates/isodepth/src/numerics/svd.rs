//! Singular value decomposition via one-sided Jacobi rotations.
//!
//! Adequate and accurate for the matrix sizes this crate analyzes (feed
//! forward projections up to a few thousand wide). Works on the transpose
//! when rows < cols so the rotation loop always sees tall matrices.

use super::tensor::NumericsError;

/// `A = U * diag(s) * Vt` with `U: m x k`, `s: k`, `Vt: k x n`,
/// `k = min(m, n)`, singular values in descending order.
#[derive(Debug, Clone)]
pub struct SvdDecomposition {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub vt: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl SvdDecomposition {
    /// Frobenius-relative reconstruction error `|A - U S Vt|_F / |A|_F`.
    pub fn reconstruction_error(&self, a: &[f64]) -> f64 {
        let (m, n) = (self.rows, self.cols);
        let k = self.s.len();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += self.u[i * k + l] * self.s[l] * self.vt[l * n + j];
                }
                let d = a[i * n + j] - acc;
                num += d * d;
                den += a[i * n + j] * a[i * n + j];
            }
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

/// Ordered singular values of a row-major `rows x cols` matrix.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>, NumericsError> {
    Ok(svd_full(a, rows, cols)?.s)
}

/// Full decomposition. Rejects non-finite input.
pub fn svd_full(a: &[f64], rows: usize, cols: usize) -> Result<SvdDecomposition, NumericsError> {
    if a.len() != rows * cols {
        return Err(NumericsError::BadData {
            op: "svd",
            shape: vec![rows, cols],
            expected: rows * cols,
            got: a.len(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite { op: "svd" });
    }

    if rows >= cols {
        let (u, s, v) = jacobi_tall(a, rows, cols);
        // v is n x n column-orthogonal; vt rows are its columns.
        let k = cols;
        let mut vt = vec![0.0; k * cols];
        for l in 0..k {
            for j in 0..cols {
                vt[l * cols + j] = v[j * k + l];
            }
        }
        Ok(SvdDecomposition {
            u,
            s,
            vt,
            rows,
            cols,
        })
    } else {
        // A = U S Vt  <=>  At = V S Ut.
        let mut at = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                at[j * rows + i] = a[i * cols + j];
            }
        }
        let (v_of_at, s, u_of_at) = jacobi_tall(&at, cols, rows);
        let k = rows;
        // U of A: rows x k, taken from the right factor of At.
        let mut u = vec![0.0; rows * k];
        for i in 0..rows {
            for l in 0..k {
                u[i * k + l] = u_of_at[i * k + l];
            }
        }
        // Vt of A: k x cols, rows are columns of v_of_at.
        let mut vt = vec![0.0; k * cols];
        for l in 0..k {
            for j in 0..cols {
                vt[l * cols + j] = v_of_at[j * k + l];
            }
        }
        Ok(SvdDecomposition {
            u,
            s,
            vt,
            rows,
            cols,
        })
    }
}

/// One-sided Jacobi on a tall `m x n` (m >= n) matrix.
/// Returns (`u`: m x n, `s`: n descending, `v`: n x n).
fn jacobi_tall(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    // Column-major working copy: columns are rotated as contiguous slices.
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a[i * n + j];
        }
    }
    let mut v = vec![0.0; n * n]; // column-major accumulator
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    const MAX_SWEEPS: usize = 60;
    const TOL: f64 = 1e-14;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let wp = w[p * m + i];
                    let wq = w[q * m + i];
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let limit = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(limit);
                if limit <= TOL {
                    continue;
                }
                // Rutishauser rotation annihilating the (p,q) inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let wp = w[p * m + i];
                    let wq = w[q * m + i];
                    w[p * m + i] = c * wp - s * wq;
                    w[q * m + i] = s * wp + c * wq;
                }
                for i in 0..n {
                    let vp = v[p * n + i];
                    let vq = v[q * n + i];
                    v[p * n + i] = c * vp - s * vq;
                    v[q * n + i] = s * vp + c * vq;
                }
            }
        }
        if off <= TOL {
            break;
        }
    }

    // Singular values are column norms; normalized columns form U.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w[j * m + i] * w[j * m + i]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = vec![0.0; m * n];
    let mut s = vec![0.0; n];
    let mut v_sorted = vec![0.0; n * n]; // row-major n x n, columns = right vectors
    for (new_j, &old_j) in order.iter().enumerate() {
        let norm = norms[old_j];
        s[new_j] = norm;
        if norm > 0.0 {
            for i in 0..m {
                u[i * n + new_j] = w[old_j * m + i] / norm;
            }
        }
        for i in 0..n {
            v_sorted[i * n + new_j] = v[old_j * n + i];
        }
    }
    (u, s, v_sorted)
}
