use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Relative tolerance under which two running column norms count as tied.
const PIVOT_TIE_RTOL: f64 = 1e-12;

/// Thin column-pivoted QR factorization `W[:, perm] = Q R`.
///
/// `q` is `L × k` with orthonormal columns, `r` is `k × M` upper triangular
/// with `|r[0][0]| ≥ |r[1][1]| ≥ …`, and `perm[j]` is the original column
/// placed at pivoted position `j`. Here `k = min(L, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PivotedQr<T: Scalar = f64> {
    pub q: Matrix<T>,
    pub r: Matrix<T>,
    pub perm: Vec<usize>,
}

impl<T: Scalar> PivotedQr<T> {
    pub fn rank_bound(&self) -> usize {
        self.q.cols()
    }

    /// `|Rᵢᵢ|` for `i < k`, non-increasing.
    pub fn diag_abs(&self) -> Vec<T> {
        (0..self.r.rows()).map(|i| self.r[(i, i)].abs()).collect()
    }

    /// Multiplies out `Q R` and undoes the column permutation.
    pub fn reconstruct(&self) -> Matrix<T> {
        let permuted = self.q.matmul(&self.r).expect("q and r shapes agree");
        permuted.unpermute_cols(&self.perm)
    }

    /// Applies the permutation to `w`, giving the matrix `Q R` approximates.
    pub fn permuted_input(&self, w: &Matrix<T>) -> Matrix<T> {
        w.permute_cols(&self.perm)
    }
}

struct Reflector<T> {
    // v[0] == 1 implicitly stored; H = I - tau v vᵀ acting on rows start..
    v: Vec<T>,
    tau: T,
}

impl<T: Scalar> Reflector<T> {
    /// Reflector mapping `x` to `‖x‖ e₁`, or `None` when `x` already has that form.
    fn annihilating(x: &[T], norm: T) -> Option<Self> {
        let x0 = x[0];
        let sigma: T = x[1..].iter().map(|&v| v * v).sum();
        if sigma == T::zero() {
            if x0 >= T::zero() {
                return None;
            }
            let mut v = vec![T::zero(); x.len()];
            v[0] = T::one();
            return Some(Self {
                v,
                tau: T::lit(2.0),
            });
        }
        // Parlett's choice keeps v0 free of cancellation when x0 > 0.
        let v0 = if x0 <= T::zero() {
            x0 - norm
        } else {
            -sigma / (x0 + norm)
        };
        let tau = T::lit(2.0) * v0 * v0 / (sigma + v0 * v0);
        let mut v = Vec::with_capacity(x.len());
        v.push(T::one());
        v.extend(x[1..].iter().map(|&xi| xi / v0));
        Some(Self { v, tau })
    }

    /// Applies `H` to rows `start..` of column `col` of `a`.
    fn apply_to_col(&self, a: &mut Matrix<T>, start: usize, col: usize) {
        let mut w = T::zero();
        for (i, &vi) in self.v.iter().enumerate() {
            w = w + vi * a[(start + i, col)];
        }
        if w == T::zero() {
            return;
        }
        let s = self.tau * w;
        for (i, &vi) in self.v.iter().enumerate() {
            a[(start + i, col)] = a[(start + i, col)] - s * vi;
        }
    }
}

fn trailing_norm_sq<T: Scalar>(a: &Matrix<T>, start: usize, col: usize) -> T {
    (start..a.rows()).map(|i| a[(i, col)] * a[(i, col)]).sum()
}

/// Householder QR with greedy column pivoting (Businger–Golub).
///
/// At each step the remaining column with the largest trailing norm is
/// moved into place; near-ties go to the lower original column index.
/// Every `Rᵢᵢ` is non-negative. The output is deterministic for a given
/// input.
pub fn qr_pivoted<T: Scalar>(w: &Matrix<T>) -> Result<PivotedQr<T>> {
    let (l, m) = w.shape();
    if let Some(idx) = w.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: idx / m,
            col: idx % m,
            value: w.as_slice()[idx].as_f64(),
        });
    }
    let k = l.min(m);
    let mut a = w.clone();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut reflectors: Vec<Option<Reflector<T>>> = Vec::with_capacity(k);
    let mut norms = vec![T::zero(); m];
    let tie = T::lit(PIVOT_TIE_RTOL);
    let mut prev_diag = T::infinity();

    for j in 0..k {
        // Exact trailing norms every step; downdating drifts and would
        // let |Rⱼⱼ| fall out of order.
        for c in j..m {
            norms[c] = trailing_norm_sq(&a, j, c).sqrt();
        }
        let mut best = j;
        for c in j + 1..m {
            let (nb, nc) = (norms[best], norms[c]);
            let tol = tie * nb.max(nc);
            if nc > nb + tol || ((nc - nb).abs() <= tol && perm[c] < perm[best]) {
                best = c;
            }
        }
        if best != j {
            for i in 0..l {
                let row = a.row_mut(i);
                row.swap(j, best);
            }
            perm.swap(j, best);
            norms.swap(j, best);
        }

        let x: Vec<T> = (j..l).map(|i| a[(i, j)]).collect();
        let norm = norms[j];
        let reflector = if norm == T::zero() {
            None
        } else {
            Reflector::annihilating(&x, norm)
        };
        if let Some(h) = &reflector {
            for c in j + 1..m {
                h.apply_to_col(&mut a, j, c);
            }
        }
        // Rounding can leave the new diagonal an ulp above its predecessor.
        let diag = norm.min(prev_diag);
        debug_assert!(norm - diag <= T::lit(1e-9) * prev_diag.max(T::one()));
        a[(j, j)] = diag;
        for i in j + 1..l {
            a[(i, j)] = T::zero();
        }
        prev_diag = diag;
        reflectors.push(reflector);
    }

    let r = a.block(0, 0, k, m);

    let mut q = Matrix::zeros(l, k);
    for i in 0..k {
        q[(i, i)] = T::one();
    }
    for (j, h) in reflectors.iter().enumerate().rev() {
        if let Some(h) = h {
            for c in j..k {
                h.apply_to_col(&mut q, j, c);
            }
        }
    }

    Ok(PivotedQr { q, r, perm })
}

/// Inverse of [`qr_pivoted`]: returns `Q R` in the original column order.
pub fn reconstruct<T: Scalar>(f: &PivotedQr<T>) -> Matrix<T> {
    f.reconstruct()
}
