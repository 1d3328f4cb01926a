//! Small dense kernels (p×p and p×m) used by the fitters.
//!
//! The latent dimension is small, so these routines favour simple, exactly
//! reproducible algorithms (Cholesky, Householder QR, cyclic Jacobi) over
//! blocked LAPACK-style code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::scalar::Scalar;

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// Returns `None` when a non-positive pivot is met.
pub fn cholesky<T: Scalar>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s = s - l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s = s - l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves a symmetric positive definite system, `None` if it is not SPD.
pub fn solve_spd<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>) -> Option<Array1<T>> {
    let l = cholesky(a)?;
    Some(cholesky_solve(l.view(), b))
}

/// Like [`solve_spd`], but when the factorisation fails a diagonal jitter
/// starting at `1e-12 · mean diag(A)` is added and grown tenfold up to eight
/// times. Returns the solution and the jitter that was needed.
pub fn solve_spd_jittered<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>) -> Option<(Array1<T>, T)> {
    if let Some(x) = solve_spd(a, b) {
        return Some((x, T::zero()));
    }
    let n = a.nrows();
    let mean_diag = (0..n).map(|i| a[(i, i)].abs()).sum::<T>() / T::lit(n.max(1) as f64);
    if !(mean_diag > T::zero()) {
        return None;
    }
    let mut jitter = T::lit(1e-12) * mean_diag;
    for _ in 0..8 {
        let mut shifted = a.to_owned();
        for i in 0..n {
            shifted[(i, i)] = shifted[(i, i)] + jitter;
        }
        if let Some(x) = solve_spd(shifted.view(), b) {
            return Some((x, jitter));
        }
        jitter = jitter * T::lit(10.0);
    }
    None
}

/// `log det A` of an SPD matrix through its Cholesky factor.
pub fn log_det_spd<T: Scalar>(a: ArrayView2<T>) -> Option<T> {
    let l = cholesky(a)?;
    Some((0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<T>() * T::lit(2.0))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order. Each eigenvector (a column of
/// the returned matrix) has its first non-negligible entry made positive, so
/// the result is reproducible across runs.
pub fn symmetric_eigen<T: Scalar>(a: ArrayView2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<T>::eye(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                let x = m[(i, j)] * m[(i, j)];
                total = total + x;
                if i != j {
                    off = off + x;
                }
            }
        }
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(j, j)]
            .partial_cmp(&m[(i, i)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut values = Array1::<T>::zeros(n);
    let mut vectors = Array2::<T>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = m[(src, src)];
        let col = v.column(src);
        let tiny = T::lit(1e3) * T::epsilon();
        let sign = col
            .iter()
            .find(|x| x.abs() > tiny)
            .map(|x| if *x < T::zero() { -T::one() } else { T::one() })
            .unwrap_or(T::one());
        for k in 0..n {
            vectors[(k, dst)] = col[k] * sign;
        }
    }
    (values, vectors)
}

/// Householder QR of a `rows × cols` matrix: `A = Q R` with `Q` square
/// orthogonal and `R` upper trapezoidal with a non-negative diagonal.
pub fn qr_positive<T: Scalar>(a: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
    let (rows, cols) = a.dim();
    let mut r = a.to_owned();
    let mut q = Array2::<T>::eye(rows);
    let steps = rows.saturating_sub(1).min(cols);
    for k in 0..steps {
        let norm = (k..rows).map(|i| r[(i, k)] * r[(i, k)]).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let alpha = if r[(k, k)] > T::zero() { -norm } else { norm };
        let mut v = Array1::<T>::zeros(rows);
        for i in k..rows {
            v[i] = r[(i, k)];
        }
        v[k] = v[k] - alpha;
        let vnorm2 = (k..rows).map(|i| v[i] * v[i]).sum::<T>();
        if vnorm2 == T::zero() {
            continue;
        }
        let two = T::lit(2.0);
        for j in 0..cols {
            let dot = (k..rows).map(|i| v[i] * r[(i, j)]).sum::<T>();
            let f = two * dot / vnorm2;
            for i in k..rows {
                r[(i, j)] = r[(i, j)] - f * v[i];
            }
        }
        for i in 0..rows {
            let dot = (k..rows).map(|l| q[(i, l)] * v[l]).sum::<T>();
            let f = two * dot / vnorm2;
            for l in k..rows {
                q[(i, l)] = q[(i, l)] - f * v[l];
            }
        }
        for i in (k + 1)..rows {
            r[(i, k)] = T::zero();
        }
    }
    for k in 0..rows.min(cols) {
        if r[(k, k)] < T::zero() {
            for j in 0..cols {
                r[(k, j)] = -r[(k, j)];
            }
            for i in 0..rows {
                q[(i, k)] = -q[(i, k)];
            }
        }
    }
    (q, r)
}

/// Singular value decomposition `A = U diag(s) Vᵀ` of a square matrix by
/// one-sided Jacobi. `U` is completed to a full orthogonal matrix when `A`
/// is singular.
pub fn svd_square<T: Scalar>(a: ArrayView2<T>) -> (Array2<T>, Array1<T>, Array2<T>) {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut w = a.to_owned();
    let mut v = Array2::<T>::eye(n);
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = (0..n).map(|i| w[(i, p)] * w[(i, p)]).sum::<T>();
                let beta = (0..n).map(|i| w[(i, q)] * w[(i, q)]).sum::<T>();
                let gamma = (0..n).map(|i| w[(i, p)] * w[(i, q)]).sum::<T>();
                if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let wp = w[(i, p)];
                    let wq = w[(i, q)];
                    w[(i, p)] = c * wp - s * wq;
                    w[(i, q)] = s * wp + c * wq;
                    let vp = v[(i, p)];
                    let vq = v[(i, q)];
                    v[(i, p)] = c * vp - s * vq;
                    v[(i, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sing: Vec<T> = (0..n)
        .map(|j| (0..n).map(|i| w[(i, j)] * w[(i, j)]).sum::<T>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        sing[j]
            .partial_cmp(&sing[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let smax = sing.iter().fold(T::zero(), |acc, &x| acc.max(x));
    let cutoff = smax * T::lit(n as f64) * eps;
    let mut u = Array2::<T>::zeros((n, n));
    let mut s = Array1::<T>::zeros(n);
    let mut vv = Array2::<T>::zeros((n, n));
    let mut filled = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        s[dst] = sing[src];
        for i in 0..n {
            vv[(i, dst)] = v[(i, src)];
        }
        if sing[src] > cutoff && sing[src] > T::zero() {
            for i in 0..n {
                u[(i, dst)] = w[(i, src)] / sing[src];
            }
            filled.push(dst);
        }
    }
    if filled.len() < n {
        complete_orthonormal(&mut u, &filled);
    }
    (u, s, vv)
}

/// Fills the columns of `u` not listed in `filled` with an orthonormal
/// completion built by Gram–Schmidt against the standard basis.
fn complete_orthonormal<T: Scalar>(u: &mut Array2<T>, filled: &[usize]) {
    let n = u.nrows();
    let mut basis: Vec<usize> = filled.to_vec();
    let missing: Vec<usize> = (0..n).filter(|j| !filled.contains(j)).collect();
    let mut candidate = 0;
    for col in missing {
        loop {
            let mut e = Array1::<T>::zeros(n);
            e[candidate % n] = T::one();
            candidate += 1;
            for _ in 0..2 {
                for &b in &basis {
                    let dot = (0..n).map(|i| u[(i, b)] * e[i]).sum::<T>();
                    for i in 0..n {
                        e[i] = e[i] - dot * u[(i, b)];
                    }
                }
            }
            let norm = e.iter().map(|x| *x * *x).sum::<T>().sqrt();
            if norm > T::lit(1e-6) {
                for i in 0..n {
                    u[(i, col)] = e[i] / norm;
                }
                basis.push(col);
                break;
            }
        }
    }
}

/// Inverse of a lower-triangular or general small matrix via Gauss–Jordan
/// elimination with partial pivoting.
pub fn invert<T: Scalar>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut inv = Array2::<T>::eye(n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            m[(i, col)]
                .abs()
                .partial_cmp(&m[(j, col)].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[(pivot, col)] == T::zero() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap((pivot, k), (col, k));
                inv.swap((pivot, k), (col, k));
            }
        }
        let d = m[(col, col)];
        for k in 0..n {
            m[(col, k)] = m[(col, k)] / d;
            inv[(col, k)] = inv[(col, k)] / d;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                if f != T::zero() {
                    for k in 0..n {
                        m[(i, k)] = m[(i, k)] - f * m[(col, k)];
                        inv[(i, k)] = inv[(i, k)] - f * inv[(col, k)];
                    }
                }
            }
        }
    }
    Some(inv)
}
