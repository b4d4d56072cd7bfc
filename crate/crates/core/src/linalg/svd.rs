use crate::error::{Error, Result};
use crate::linalg::matrix::dot;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Sweep cap for one-sided Jacobi.
pub const MAX_SWEEPS: usize = 30;

/// A pair of columns counts as orthogonal once `|pᵀq| ≤ tol · ‖p‖‖q‖`.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

/// Thin SVD `W = U diag(σ) Vᵀ` with `σ` sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd<T: Scalar = f64> {
    pub u: Matrix<T>,
    pub sigma: Vec<T>,
    pub vt: Matrix<T>,
}

impl<T: Scalar> Svd<T> {
    pub fn reconstruct(&self) -> Matrix<T> {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u[(i, j)] * self.sigma[j]
        });
        us.matmul(&self.vt).expect("u and vt shapes agree")
    }

    /// Best rank-`k` approximation `Σ_{i<k} σᵢ uᵢ vᵢᵀ`.
    pub fn truncated(&self, k: usize) -> Matrix<T> {
        let k = k.min(self.sigma.len());
        Matrix::from_fn(self.u.rows(), self.vt.cols(), |i, j| {
            (0..k).fold(T::zero(), |s, t| {
                s + self.u[(i, t)] * self.sigma[t] * self.vt[(t, j)]
            })
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Wide inputs are handled through their transpose. Fails with
/// [`Error::NoConvergence`] if some column pair is still not orthogonal
/// after [`MAX_SWEEPS`] sweeps.
pub fn svd<T: Scalar>(w: &Matrix<T>) -> Result<Svd<T>> {
    let (l, m) = w.shape();
    if let Some(idx) = w.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: idx / m,
            col: idx % m,
            value: w.as_slice()[idx].as_f64(),
        });
    }
    let transposed = l < m;
    let work = if transposed { w.transpose() } else { w.clone() };
    let (rows, n) = work.shape();

    // Columns of the working matrix and of V, stored contiguously.
    let mut b: Vec<Vec<T>> = (0..n).map(|j| work.col(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();

    let tol = T::lit(ORTHOGONALITY_TOL).max(T::epsilon() * T::from_count(rows));
    let mut converged = false;
    let mut worst = T::zero();
    for _ in 0..MAX_SWEEPS {
        worst = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&b[p], &b[p]);
                let beta = dot(&b[q], &b[q]);
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                let gamma = dot(&b[p], &b[q]);
                let ratio = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                worst = worst.max(ratio);
                if ratio <= tol {
                    continue;
                }
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if worst <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: worst.as_f64(),
        });
    }

    let norms: Vec<T> = b.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma: Vec<T> = order.iter().map(|&j| norms[j]).collect();
    let mut left: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > T::zero() {
            left.push(b[j].iter().map(|&x| x / norms[j]).collect());
        } else {
            left.push(vec![T::zero(); rows]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut left, &missing);

    let left_mat = Matrix::from_fn(rows, n, |i, j| left[j][i]);
    let right_t = Matrix::from_fn(n, n, |i, j| v[order[i]][j]);

    Ok(if transposed {
        // wᵀ = U Σ Vᵀ  ⇒  w = V Σ Uᵀ
        Svd {
            u: right_t.transpose(),
            sigma,
            vt: left_mat.transpose(),
        }
    } else {
        Svd {
            u: left_mat,
            sigma,
            vt: right_t,
        }
    })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the zero columns listed in `missing` with unit vectors orthogonal
/// to every other column.
fn complete_orthonormal<T: Scalar>(cols: &mut [Vec<T>], missing: &[usize]) {
    let rows = cols.first().map_or(0, Vec::len);
    let mut candidate = 0;
    for &slot in missing {
        while candidate < rows {
            let mut x = vec![T::zero(); rows];
            x[candidate] = T::one();
            candidate += 1;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let proj = dot(&x, c);
                    for (xi, &ci) in x.iter_mut().zip(c) {
                        *xi = *xi - proj * ci;
                    }
                }
            }
            let norm = dot(&x, &x).sqrt();
            if norm > T::lit(0.5) {
                cols[slot] = x.into_iter().map(|xi| xi / norm).collect();
                break;
            }
        }
    }
}
