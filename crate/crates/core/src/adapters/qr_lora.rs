use crate::adapters::{Adapter, Method};
use crate::error::{Error, Result};
use crate::linalg::{qr_pivoted, Matrix};
use crate::rank::{select_rank, RankPolicy};
use crate::scalar::Scalar;

/// Frozen pivoted-QR basis of `w0` plus one trainable scalar per retained
/// direction.
///
/// The update is `ΔW = Σᵢ λᵢ qᵢ rᵢᵀ` with the pivot permutation undone, so
/// it lives in `w0`'s column order. With every direction kept and `λ = 1`
/// the update equals `w0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QrLoraAdapter<T: Scalar = f64> {
    w0: Matrix<T>,
    q_basis: Matrix<T>,
    r_rows: Matrix<T>,
    perm: Vec<usize>,
    diag: Vec<T>,
    lambda: Vec<T>,
}

impl<T: Scalar> QrLoraAdapter<T> {
    /// Factorizes `w0`, keeps the rank chosen by `policy` and zeroes `λ`.
    pub fn build(w0: &Matrix<T>, policy: RankPolicy) -> Result<Self> {
        let f = qr_pivoted(w0)?;
        let diag = f.diag_abs();
        let r = select_rank(&diag, policy)?;
        Ok(Self {
            w0: w0.clone(),
            q_basis: f.q.block(0, 0, f.q.rows(), r),
            r_rows: f.r.block(0, 0, r, f.r.cols()),
            perm: f.perm,
            diag,
            lambda: vec![T::zero(); r],
        })
    }

    /// Reassembles an adapter from stored factors, checking their shapes.
    pub fn from_parts(
        w0: Matrix<T>,
        q_basis: Matrix<T>,
        r_rows: Matrix<T>,
        perm: Vec<usize>,
        lambda: Vec<T>,
    ) -> Result<Self> {
        let (l, m) = w0.shape();
        let r = lambda.len();
        if q_basis.shape() != (l, r) || r_rows.shape() != (r, m) || perm.len() != m {
            return Err(Error::Format(format!(
                "inconsistent QR-LoRA factors: w0 {l}x{m}, q {:?}, r {:?}, perm {}, lambda {r}",
                q_basis.shape(),
                r_rows.shape(),
                perm.len()
            )));
        }
        let mut seen = vec![false; m];
        for &p in &perm {
            if p >= m || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Format("perm is not a permutation".into()));
            }
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite lambda".into()));
        }
        let diag = (0..r).map(|i| r_rows[(i, i)].abs()).collect();
        Ok(Self {
            w0,
            q_basis,
            r_rows,
            perm,
            diag,
            lambda,
        })
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn w0(&self) -> &Matrix<T> {
        &self.w0
    }

    /// First `r` pivoted-Q columns, `L × r`.
    pub fn q_basis(&self) -> &Matrix<T> {
        &self.q_basis
    }

    /// First `r` rows of `R`, in pivoted column order, `r × M`.
    pub fn r_rows(&self) -> &Matrix<T> {
        &self.r_rows
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// `|Rᵢᵢ|` of the full factorization (only the first `r` when rebuilt from parts).
    pub fn diag(&self) -> &[T] {
        &self.diag
    }

    pub fn lambda(&self) -> &[T] {
        &self.lambda
    }

    pub fn lambda_mut(&mut self) -> &mut [T] {
        &mut self.lambda
    }

    /// The `i`-th rank-one basis matrix `qᵢ rᵢᵀ` in original column order.
    pub fn basis_matrix(&self, i: usize) -> Matrix<T> {
        let (l, m) = self.w0.shape();
        let mut out = Matrix::zeros(l, m);
        for a in 0..l {
            let qa = self.q_basis[(a, i)];
            for (b, &p) in self.perm.iter().enumerate() {
                out[(a, p)] = qa * self.r_rows[(i, b)];
            }
        }
        out
    }

    /// `∂loss/∂λᵢ = ⟨g, qᵢ rᵢᵀ⟩_F`.
    pub fn grad_lambda(&self, g: &Matrix<T>) -> Result<Vec<T>> {
        self.w0.check_same_shape(g, "grad_lambda")?;
        let g_perm = g.permute_cols(&self.perm);
        // (G_perm · Rᵣᵀ)[:, i] dotted with qᵢ
        let g_rt = g_perm.matmul_tr(&self.r_rows)?;
        Ok((0..self.rank())
            .map(|i| {
                (0..g.rows()).fold(T::zero(), |s, a| s + self.q_basis[(a, i)] * g_rt[(a, i)])
            })
            .collect())
    }
}

impl<T: Scalar> Adapter<T> for QrLoraAdapter<T> {
    fn method(&self) -> Method {
        Method::QrLora
    }

    fn base(&self) -> &Matrix<T> {
        &self.w0
    }

    fn delta_w(&self) -> Matrix<T> {
        let (l, m) = self.w0.shape();
        let mut permuted = Matrix::zeros(l, m);
        for (i, &lam) in self.lambda.iter().enumerate() {
            if lam == T::zero() {
                continue;
            }
            let r_row = self.r_rows.row(i);
            for a in 0..l {
                let coef = lam * self.q_basis[(a, i)];
                for (o, &rv) in permuted.row_mut(a).iter_mut().zip(r_row) {
                    *o = *o + coef * rv;
                }
            }
        }
        permuted.unpermute_cols(&self.perm)
    }

    fn trainable_count(&self) -> usize {
        self.rank()
    }

    fn trainables(&self) -> Vec<(&'static str, &[T])> {
        vec![("lambda", &self.lambda)]
    }

    fn trainables_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![("lambda", &mut self.lambda)]
    }

    fn grad_trainables(&self, g: &Matrix<T>) -> Result<Vec<(&'static str, Vec<T>)>> {
        Ok(vec![("lambda", self.grad_lambda(g)?)])
    }
}
