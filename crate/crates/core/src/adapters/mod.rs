//! The four ways of adapting a frozen weight matrix: QR-LoRA, LoRA,
//! SVD-LoRA and full fine-tuning, behind the [`Adapter`] trait.

mod lora;
mod qr_lora;
mod spec;

use rand::Rng;

pub use lora::LoraAdapter;
pub use qr_lora::QrLoraAdapter;
pub use spec::{AdapterSpec, LayerScope, Method, Projection};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rank::RankPolicy;
use crate::scalar::Scalar;

/// Common surface of every adaptation method.
pub trait Adapter<T: Scalar> {
    fn method(&self) -> Method;

    /// The frozen starting weight.
    fn base(&self) -> &Matrix<T>;

    fn delta_w(&self) -> Matrix<T>;

    fn effective_weight(&self) -> Matrix<T> {
        self.base()
            .add(&self.delta_w())
            .expect("delta_w has the base shape")
    }

    fn trainable_count(&self) -> usize;

    /// Named views of the trainable tensors, flattened row-major.
    fn trainables(&self) -> Vec<(&'static str, &[T])>;

    fn trainables_mut(&mut self) -> Vec<(&'static str, &mut [T])>;

    /// Gradients of the trainables given `g = ∂loss/∂(effective weight)`,
    /// in the order of [`Adapter::trainables`].
    fn grad_trainables(&self, g: &Matrix<T>) -> Result<Vec<(&'static str, Vec<T>)>>;
}

pub fn build_qr_adapter<T: Scalar>(w0: &Matrix<T>, policy: RankPolicy) -> Result<QrLoraAdapter<T>> {
    QrLoraAdapter::build(w0, policy)
}

/// Full fine-tuning: the whole weight is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct FullWeight<T: Scalar = f64> {
    w0: Matrix<T>,
    weight: Matrix<T>,
}

impl<T: Scalar> FullWeight<T> {
    pub fn new(w0: &Matrix<T>) -> Self {
        Self {
            w0: w0.clone(),
            weight: w0.clone(),
        }
    }

    pub fn from_parts(w0: Matrix<T>, weight: Matrix<T>) -> Result<Self> {
        w0.check_same_shape(&weight, "full weight")?;
        Ok(Self { w0, weight })
    }

    pub fn weight(&self) -> &Matrix<T> {
        &self.weight
    }
}

impl<T: Scalar> Adapter<T> for FullWeight<T> {
    fn method(&self) -> Method {
        Method::FullFt
    }

    fn base(&self) -> &Matrix<T> {
        &self.w0
    }

    fn delta_w(&self) -> Matrix<T> {
        self.weight.sub(&self.w0).expect("same shape")
    }

    fn effective_weight(&self) -> Matrix<T> {
        self.weight.clone()
    }

    fn trainable_count(&self) -> usize {
        self.weight.rows() * self.weight.cols()
    }

    fn trainables(&self) -> Vec<(&'static str, &[T])> {
        vec![("weight", self.weight.as_slice())]
    }

    fn trainables_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![("weight", self.weight.as_mut_slice())]
    }

    fn grad_trainables(&self, g: &Matrix<T>) -> Result<Vec<(&'static str, Vec<T>)>> {
        self.weight.check_same_shape(g, "full grad")?;
        Ok(vec![("weight", g.as_slice().to_vec())])
    }
}

/// Any of the concrete adapters.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyAdapter<T: Scalar = f64> {
    QrLora(QrLoraAdapter<T>),
    Lora(LoraAdapter<T>),
    Full(FullWeight<T>),
}

impl<T: Scalar> AnyAdapter<T> {
    /// Wraps `w0` according to `spec.method`.
    pub fn build<R: Rng + ?Sized>(spec: &AdapterSpec, w0: &Matrix<T>, rng: &mut R) -> Result<Self> {
        Ok(match spec.method {
            Method::QrLora => AnyAdapter::QrLora(QrLoraAdapter::build(w0, spec.policy)?),
            Method::Lora => AnyAdapter::Lora(LoraAdapter::init(w0, spec.rank, rng)?),
            Method::SvdLora => AnyAdapter::Lora(LoraAdapter::init_svd(
                w0,
                spec.rank,
                spec.top_k,
                spec.alpha,
                rng,
            )?),
            Method::FullFt => AnyAdapter::Full(FullWeight::new(w0)),
        })
    }

    fn inner(&self) -> &dyn Adapter<T> {
        match self {
            AnyAdapter::QrLora(a) => a,
            AnyAdapter::Lora(a) => a,
            AnyAdapter::Full(a) => a,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Adapter<T> {
        match self {
            AnyAdapter::QrLora(a) => a,
            AnyAdapter::Lora(a) => a,
            AnyAdapter::Full(a) => a,
        }
    }
}

impl<T: Scalar> Adapter<T> for AnyAdapter<T> {
    fn method(&self) -> Method {
        self.inner().method()
    }

    fn base(&self) -> &Matrix<T> {
        self.inner().base()
    }

    fn delta_w(&self) -> Matrix<T> {
        self.inner().delta_w()
    }

    fn effective_weight(&self) -> Matrix<T> {
        self.inner().effective_weight()
    }

    fn trainable_count(&self) -> usize {
        self.inner().trainable_count()
    }

    fn trainables(&self) -> Vec<(&'static str, &[T])> {
        self.inner().trainables()
    }

    fn trainables_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        self.inner_mut().trainables_mut()
    }

    fn grad_trainables(&self, g: &Matrix<T>) -> Result<Vec<(&'static str, Vec<T>)>> {
        self.inner().grad_trainables(g)
    }
}

/// Shape summary used for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub n_layers: usize,
    /// Width of the square attention projections.
    pub d_model: usize,
    /// Every parameter of the model, head included.
    pub total_params: usize,
}

/// Trainable scalars introduced by `spec`, excluding the task head.
///
/// `qr_ranks` lists the selected rank of each adapted matrix in
/// [`AdapterSpec::targets`] order and is only read for QR-LoRA.
pub fn count_trainable(spec: &AdapterSpec, dims: &ModelDims, qr_ranks: &[usize]) -> Result<usize> {
    let targets = spec.targets(dims.n_layers)?;
    match spec.method {
        Method::FullFt => Ok(dims.total_params),
        Method::Lora | Method::SvdLora => Ok(targets.len() * spec.rank * 2 * dims.d_model),
        Method::QrLora => {
            if qr_ranks.len() != targets.len() {
                return Err(Error::InvalidSpec(format!(
                    "{} adapted matrices but {} ranks supplied",
                    targets.len(),
                    qr_ranks.len()
                )));
            }
            Ok(qr_ranks.iter().sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Independent prefix scan over squared diagonals.
    fn energy_rank_oracle(diag: &[f64], tau: f64) -> usize {
        let total: f64 = diag.iter().map(|d| d * d).sum();
        (1..=diag.len())
            .find(|&r| diag[..r].iter().map(|d| d * d).sum::<f64>() / total >= tau)
            .unwrap()
    }

    #[test]
    fn qr_adapter_on_identity() {
        let ad = build_qr_adapter(&Matrix::<f64>::identity(4), RankPolicy::Energy(0.5)).unwrap();
        assert_eq!(ad.rank(), 2);
        assert_eq!(ad.lambda(), &[0.0, 0.0]);
        assert_eq!(ad.effective_weight(), Matrix::identity(4));
    }

    #[test]
    fn qr_adapter_full_rank_reconstructs() {
        let w0 = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let mut ad = build_qr_adapter(&w0, RankPolicy::Fixed(3)).unwrap();
        ad.lambda_mut().fill(1.0);
        assert!(ad.delta_w().max_abs_diff(&w0).unwrap() < 1e-15);
    }

    #[test]
    fn qr_adapter_rank_matches_prefix_scan() {
        let w0 = random(12, 10, 3);
        let ad = build_qr_adapter(&w0, RankPolicy::Energy(0.8)).unwrap();
        assert_eq!(ad.rank(), energy_rank_oracle(ad.diag(), 0.8));
        let qtq = ad.q_basis().tr_matmul(ad.q_basis()).unwrap();
        assert!(qtq.max_abs_diff(&Matrix::identity(ad.rank())).unwrap() < 1e-10);
    }

    #[test]
    fn unit_lambda_gives_first_basis_matrix() {
        let w0 = random(6, 5, 4);
        let mut ad = build_qr_adapter(&w0, RankPolicy::Fixed(3)).unwrap();
        ad.lambda_mut()[0] = 1.0;
        let d = ad.delta_w();
        assert_eq!(d, ad.basis_matrix(0));
        let r0: f64 = ad.r_rows().row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((d.frobenius_norm() - r0).abs() < 1e-12);
    }

    #[test]
    fn basis_gradient_is_axis_aligned() {
        let w0 = random(7, 6, 5);
        let ad = build_qr_adapter(&w0, RankPolicy::Fixed(4)).unwrap();
        let g = ad.basis_matrix(0);
        let grad = ad.grad_lambda(&g).unwrap();
        let r0sq: f64 = ad.r_rows().row(0).iter().map(|v| v * v).sum();
        assert!((grad[0] - r0sq).abs() < 1e-12 * r0sq);
        for &x in &grad[1..] {
            assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0 = random(5, 4, 6);
        let g = Matrix::zeros(5, 4);
        for spec in [
            AdapterSpec::qr_lora(RankPolicy::Fixed(2), LayerScope::All, &[Projection::O]),
            AdapterSpec::lora(2, LayerScope::All, &[Projection::O]),
            AdapterSpec::svd_lora(2, 1, 2.0, LayerScope::All, &[Projection::O]),
            AdapterSpec::full_ft(),
        ] {
            let ad = AnyAdapter::build(&spec, &w0, &mut rng).unwrap();
            for (_, grad) in ad.grad_trainables(&g).unwrap() {
                assert!(grad.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn fresh_lora_and_full_are_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w0 = random(5, 4, 7);
        let lora = LoraAdapter::init(&w0, 2, &mut rng).unwrap();
        assert_eq!(lora.effective_weight(), w0);
        assert_eq!(lora.trainable_count(), 2 * (5 + 4));
        assert_eq!(FullWeight::new(&w0).effective_weight(), w0);
    }

    #[test]
    fn svd_lora_seeds_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = random(6, 6, 8);
        let ad = LoraAdapter::init_svd(&w0, 2, 1, 2.0, &mut rng).unwrap();
        let trunc = crate::linalg::svd(&w0).unwrap().truncated(1);
        assert!(ad.delta_w().max_abs_diff(&trunc).unwrap() < 1e-9);
        let eff = ad.effective_weight();
        assert!(eff.max_abs_diff(&w0.add(&trunc).unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let w0 = random(4, 4, 1);
        let ad = build_qr_adapter(&w0, RankPolicy::Fixed(2)).unwrap();
        assert!(ad.grad_lambda(&Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn counting() {
        let dims = ModelDims {
            n_layers: 15,
            d_model: 768,
            total_params: 0,
        };
        let lora = AdapterSpec::lora(2, LayerScope::All, &[Projection::Q, Projection::V]);
        assert_eq!(count_trainable(&lora, &dims, &[]).unwrap(), 92_160);
        let empty = AdapterSpec::lora(2, LayerScope::Layers(Default::default()), &[Projection::Q]);
        assert_eq!(count_trainable(&empty, &dims, &[]).unwrap(), 0);
        let dims12 = ModelDims {
            n_layers: 12,
            ..dims
        };
        let qr = AdapterSpec::qr_lora(RankPolicy::Energy(0.5), LayerScope::Last(4), &[Projection::O]);
        assert_eq!(count_trainable(&qr, &dims12, &[150, 150, 150, 151]).unwrap(), 601);
        assert!(count_trainable(&qr, &dims12, &[150]).is_err());
    }
}
