//! Symmetric eigendecomposition: Householder tridiagonalization followed by
//! implicit-shift QL iteration (the classic EISPACK tred2/tql2 pair).
//!
//! The working matrix is stored with eigenvectors as *rows* so that every hot
//! inner loop walks contiguous memory; the result is transposed once at the
//! end so the returned `U` has eigenvectors as columns, eigenvalues ascending.

use super::{NumericsError, Tensor};

const MAX_N: usize = 4096;
const SYMMETRY_TOL: f64 = 1e-10;
const MAX_QL_ITER: usize = 50;

/// Eigendecomposition `A = U diag(λ) Uᵀ` of a symmetric matrix.
///
/// Returns eigenvalues ascending and the orthonormal eigenvector matrix `U`
/// (columns are eigenvectors, matching the eigenvalue order).
pub fn symmetric_eig(matrix: &Tensor) -> Result<(Vec<f64>, Tensor), NumericsError> {
    let n = matrix.rows();
    if matrix.cols() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "symmetric_eig",
            detail: format!("matrix shape {:?} is not square", matrix.shape()),
        });
    }
    if n > MAX_N {
        return Err(NumericsError::EigSizeBound { n, max: MAX_N });
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((matrix.at(i, j) - matrix.at(j, i)).abs());
        }
    }
    if asym >= SYMMETRY_TOL {
        return Err(NumericsError::NotSymmetric { asym });
    }

    // w[i*n + k]: row i will become eigenvector i. Symmetric input, so the
    // initial copy needs no transpose.
    let mut w: Vec<f64> = matrix.data().to_vec();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];

    tred2(n, &mut w, &mut d, &mut e);
    tql2(n, &mut w, &mut d, &mut e)?;

    // Transpose into column-eigenvector layout.
    let mut u = vec![0.0f64; n * n];
    for i in 0..n {
        for k in 0..n {
            u[k * n + i] = w[i * n + k];
        }
    }
    Ok((d, Tensor::new(vec![n, n], u)?))
}

/// Householder reduction to tridiagonal form with accumulated transformations.
/// `w` holds the transformation with eigenvector index as the row index.
fn tred2(n: usize, w: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    if n == 1 {
        d[0] = w[0];
        w[0] = 1.0;
        return;
    }
    for j in 0..n {
        d[j] = w[j * n + (n - 1)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0f64;
        let mut h = 0.0f64;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = w[j * n + (i - 1)];
                w[i * n + j] = 0.0;
                w[j * n + i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].fill(0.0);

            // Apply the similarity transformation to the remaining block.
            for j in 0..i {
                f = d[j];
                w[i * n + j] = f;
                g = e[j] + w[j * n + j] * f;
                let row_j = j * n;
                for k in (j + 1)..i {
                    g += w[row_j + k] * d[k];
                    e[k] += w[row_j + k] * f;
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
                let row_j = j * n;
                for k in j..i {
                    w[row_j + k] -= f * e[k] + g * d[k];
                }
                d[j] = w[j * n + (i - 1)];
                w[j * n + i] = 0.0;
            }
        }
        d[i] = h;
    }

    // Accumulate transformations.
    for i in 0..(n - 1) {
        w[i * n + (n - 1)] = w[i * n + i];
        w[i * n + i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            let row_i1 = (i + 1) * n;
            for k in 0..=i {
                d[k] = w[row_i1 + k] / h;
            }
            for j in 0..=i {
                let mut g = 0.0f64;
                let row_j = j * n;
                for k in 0..=i {
                    g += w[row_i1 + k] * w[row_j + k];
                }
                for k in 0..=i {
                    w[row_j + k] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            w[(i + 1) * n + k] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = w[j * n + (n - 1)];
        w[j * n + (n - 1)] = 0.0;
    }
    w[(n - 1) * n + (n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL iteration on the tridiagonal form, rotating the
/// accumulated rows of `w`; sorts eigenvalues ascending.
fn tql2(n: usize, w: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<(), NumericsError> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0f64;
    let mut tst1 = 0.0f64;
    let eps = 2.0f64.powi(-52);
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITER {
                    return Err(NumericsError::EigNoConvergence { index: l });
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
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0f64;
                let mut s2 = 0.0f64;
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

                    // Rotate eigenvector rows i and i+1 (contiguous memory).
                    let (lo, hi) = w.split_at_mut((i + 1) * n);
                    let row_i = &mut lo[i * n..(i + 1) * n];
                    let row_i1 = &mut hi[..n];
                    for k in 0..n {
                        let h = row_i1[k];
                        row_i1[k] = s * row_i[k] + c * h;
                        row_i[k] = c * row_i[k] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    // Sort ascending, swapping eigenvector rows along.
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for j in (i + 1)..n {
            if d[j] < p {
                k = j;
                p = d[j];
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for col in 0..n {
                w.swap(i * n + col, k * n + col);
            }
        }
    }
    Ok(())
}
