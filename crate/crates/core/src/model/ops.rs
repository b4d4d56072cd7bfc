//! Row-wise building blocks of the encoder and their derivatives.

use crate::linalg::Matrix;

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax of each row.
pub fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Saved state of a layer norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LayerNormCache) {
    let (n, d) = x.shape();
    let mut xhat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[(i, j)] = h;
            y[(i, j)] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `∂L/∂x`, accumulating `∂L/∂γ` and `∂L/∂β` when given.
pub fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gamma: &[f64],
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let inv_d = 1.0 / d as f64;
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..d {
                db[j] += dyr[j];
            }
        }
        let dxhat: Vec<f64> = (0..d).map(|j| dyr[j] * gamma[j]).collect();
        let sum: f64 = dxhat.iter().sum();
        let sum_x: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[(i, j)] = is * (dxhat[j] - inv_d * sum - xh[j] * inv_d * sum_x);
        }
    }
    dx
}

/// Fixed sinusoidal position table, `max_len × d`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_len, d, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Mean cross-entropy over rows and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let (b, _) = logits.shape();
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[(i, y)].max(f64::MIN_POSITIVE).ln();
        probs[(i, y)] -= 1.0;
    }
    (loss * inv_b, probs.scale(inv_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x = {x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = Matrix::from_rows(&[vec![1000.0, 1001.0, 999.0], vec![-5.0, 0.0, 5.0]]).unwrap();
        softmax_rows(&mut m);
        for i in 0..2 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 2.0, 0.1]]).unwrap();
        let gamma = [1.1, 0.9, -0.5, 2.0];
        let beta = [0.0, 0.1, 0.2, 0.3];
        let probe = [0.7, -0.2, 0.4, 1.3];
        let loss = |x: &Matrix| {
            let (y, _) = layer_norm(x, &gamma, &beta);
            y.row(0).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let dy = Matrix::from_rows(&[probe.to_vec()]).unwrap();
        let dx = layer_norm_backward(&dy, &cache, &gamma, None, None);
        for j in 0..4 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[(0, j)] += h;
            let mut xm = x.clone();
            xm[(0, j)] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[(0, j)]).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Matrix::zeros(2, 4);
        let (loss, grad) = cross_entropy(&logits, &[0, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad[(0, 0)] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
    }
}
