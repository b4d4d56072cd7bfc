use rand::Rng;

use crate::adapters::{Adapter, Method};
use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix};
use crate::scalar::Scalar;

/// Low-rank update `ΔW = scaling · B A` with trainable `B` (`L × r`) and `A` (`r × M`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar = f64> {
    w0: Matrix<T>,
    b: Matrix<T>,
    a: Matrix<T>,
    scaling: T,
    method: Method,
}

fn uniform_a<T: Scalar, R: Rng + ?Sized>(rank: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rank, cols, |_, _| T::lit(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> LoraAdapter<T> {
    /// Standard initialization: `A ~ U(−1/√M, 1/√M)`, `B = 0`, scaling 1.
    pub fn init<R: Rng + ?Sized>(w0: &Matrix<T>, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidSpec("LoRA rank must be >= 1".into()));
        }
        let (l, m) = w0.shape();
        Ok(Self {
            w0: w0.clone(),
            b: Matrix::zeros(l, rank),
            a: uniform_a(rank, m, rng),
            scaling: T::one(),
            method: Method::Lora,
        })
    }

    /// SVD-seeded factors: the first `top_k` columns of `B` and rows of `A`
    /// are `√σᵢ uᵢ` and `√σᵢ vᵢᵀ`; the rest start like plain LoRA. Scaling
    /// is `alpha / rank`, so `ΔW · rank / alpha` starts at the rank-`top_k`
    /// truncation of `w0`.
    pub fn init_svd<R: Rng + ?Sized>(
        w0: &Matrix<T>,
        rank: usize,
        top_k: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || top_k == 0 || top_k > rank {
            return Err(Error::InvalidSpec(format!(
                "SVD-LoRA needs 1 <= top_k ({top_k}) <= rank ({rank})"
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidSpec(format!("alpha {alpha} must be > 0")));
        }
        let f = svd(w0)?;
        let (l, m) = w0.shape();
        let mut b = Matrix::zeros(l, rank);
        let mut a = uniform_a(rank, m, rng);
        let k = top_k.min(f.sigma.len());
        for t in 0..k {
            let s = f.sigma[t].sqrt();
            for i in 0..l {
                b[(i, t)] = f.u[(i, t)] * s;
            }
            for j in 0..m {
                a[(t, j)] = f.vt[(t, j)] * s;
            }
        }
        Ok(Self {
            w0: w0.clone(),
            b,
            a,
            scaling: T::lit(alpha) / T::from_count(rank),
            method: Method::SvdLora,
        })
    }

    pub fn from_parts(
        w0: Matrix<T>,
        b: Matrix<T>,
        a: Matrix<T>,
        scaling: T,
        method: Method,
    ) -> Result<Self> {
        let (l, m) = w0.shape();
        if b.rows() != l || a.cols() != m || b.cols() != a.rows() {
            return Err(Error::Format(format!(
                "inconsistent LoRA factors: w0 {l}x{m}, b {:?}, a {:?}",
                b.shape(),
                a.shape()
            )));
        }
        if !matches!(method, Method::Lora | Method::SvdLora) {
            return Err(Error::Format(format!("{method} is not a LoRA method")));
        }
        Ok(Self {
            w0,
            b,
            a,
            scaling,
            method,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b_mut(&mut self) -> &mut Matrix<T> {
        &mut self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix<T> {
        &mut self.a
    }

    pub fn scaling(&self) -> T {
        self.scaling
    }
}

impl<T: Scalar> Adapter<T> for LoraAdapter<T> {
    fn method(&self) -> Method {
        self.method
    }

    fn base(&self) -> &Matrix<T> {
        &self.w0
    }

    fn delta_w(&self) -> Matrix<T> {
        self.b
            .matmul(&self.a)
            .expect("factor shapes agree")
            .scale(self.scaling)
    }

    fn trainable_count(&self) -> usize {
        self.b.rows() * self.b.cols() + self.a.rows() * self.a.cols()
    }

    fn trainables(&self) -> Vec<(&'static str, &[T])> {
        vec![("lora_b", self.b.as_slice()), ("lora_a", self.a.as_slice())]
    }

    fn trainables_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("lora_b", self.b.as_mut_slice()),
            ("lora_a", self.a.as_mut_slice()),
        ]
    }

    /// `∂B = s · G Aᵀ`, `∂A = s · Bᵀ G`.
    fn grad_trainables(&self, g: &Matrix<T>) -> Result<Vec<(&'static str, Vec<T>)>> {
        self.w0.check_same_shape(g, "lora grad")?;
        let db = g.matmul_tr(&self.a)?.scale(self.scaling);
        let da = self.b.tr_matmul(g)?.scale(self.scaling);
        Ok(vec![("lora_b", db.into_vec()), ("lora_a", da.into_vec())])
    }
}
