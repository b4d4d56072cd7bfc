use crate::adapters::{Adapter, Projection};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, LayerNormCache};
use crate::model::{qualified, Gradients, Slot, TransformerModel};

struct LayerCache {
    x_in: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    z: Matrix,
    ln1: LayerNormCache,
    y1: Matrix,
    f1: Matrix,
    g: Matrix,
    ln2: LayerNormCache,
}

struct SeqCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
}

/// Activations saved by [`TransformerModel::forward`] for one batch.
pub struct ForwardCache {
    generation: u64,
    weights: Vec<[Matrix; 4]>,
    seqs: Vec<SeqCache>,
    pooled: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.seqs.len()
    }

    /// Attention probabilities of `head` in `layer` for sequence `seq`.
    pub fn attention(&self, seq: usize, layer: usize, head: usize) -> &Matrix {
        &self.seqs[seq].layers[layer].probs[head]
    }
}

pub struct ForwardOutput {
    /// `batch × n_classes`.
    pub logits: Matrix,
    pub cache: ForwardCache,
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sums_into(m: &Matrix, acc: &mut [f64]) {
    for i in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
}

fn write_block(dst: &mut Matrix, src: &Matrix, c0: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[c0..c0 + src.cols()].copy_from_slice(src.row(i));
    }
}

impl TransformerModel {
    fn check_batch(&self, batch: &[Vec<usize>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidDimensions("empty batch".into()));
        }
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::InvalidDimensions("empty sequence".into()));
            }
            if seq.len() > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: self.config.max_seq_len,
                });
            }
            if let Some((position, &token)) =
                seq.iter().enumerate().find(|(_, &t)| t >= self.config.vocab_size)
            {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Runs the encoder on every sequence of `batch`.
    pub fn forward(&self, batch: &[Vec<usize>]) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let weights: Vec<[Matrix; 4]> = self
            .layers
            .iter()
            .map(|l| [0, 1, 2, 3].map(|i| l.attn.slots[i].effective_weight()))
            .collect();

        let mut pooled = Matrix::zeros(batch.len(), d);
        let mut seqs = Vec::with_capacity(batch.len());
        for (b, tokens) in batch.iter().enumerate() {
            let n = tokens.len();
            let mut x = Matrix::from_fn(n, d, |i, j| {
                self.embedding[(tokens[i], j)] + self.positions[(i, j)]
            });
            let mut layer_caches = Vec::with_capacity(self.layers.len());
            for (layer, w) in self.layers.iter().zip(&weights) {
                let q = x.matmul(&w[0])?;
                let k = x.matmul(&w[1])?;
                let v = x.matmul(&w[2])?;
                let mut z = Matrix::zeros(n, d);
                let mut probs = Vec::with_capacity(self.config.n_heads);
                for h in 0..self.config.n_heads {
                    let (qh, kh, vh) = (
                        q.block(0, h * dh, n, dh),
                        k.block(0, h * dh, n, dh),
                        v.block(0, h * dh, n, dh),
                    );
                    let mut p = qh.matmul_tr(&kh)?.scale(scale);
                    softmax_rows(&mut p);
                    write_block(&mut z, &p.matmul(&vh)?, h * dh);
                    probs.push(p);
                }
                let attn_out = z.matmul(&w[3])?;
                let (y1, ln1) = layer_norm(&x.add(&attn_out)?, &layer.ln1_gamma, &layer.ln1_beta);
                let mut f1 = y1.matmul(&layer.ff1)?;
                add_bias(&mut f1, &layer.ff1_bias);
                let g = f1.map(gelu);
                let mut f2 = g.matmul(&layer.ff2)?;
                add_bias(&mut f2, &layer.ff2_bias);
                let (y2, ln2) = layer_norm(&y1.add(&f2)?, &layer.ln2_gamma, &layer.ln2_beta);
                layer_caches.push(LayerCache {
                    x_in: x,
                    q,
                    k,
                    v,
                    probs,
                    z,
                    ln1,
                    y1,
                    f1,
                    g,
                    ln2,
                });
                x = y2;
            }
            let inv_n = 1.0 / n as f64;
            for j in 0..d {
                pooled[(b, j)] = (0..n).map(|i| x[(i, j)]).sum::<f64>() * inv_n;
            }
            seqs.push(SeqCache {
                tokens: tokens.clone(),
                layers: layer_caches,
            });
        }
        let mut logits = pooled.matmul(&self.head)?;
        add_bias(&mut logits, &self.head_bias);
        Ok(ForwardOutput {
            logits,
            cache: ForwardCache {
                generation: self.generation,
                weights,
                seqs,
                pooled,
            },
        })
    }

    /// Gradients of every trainable tensor given `∂loss/∂logits`.
    ///
    /// `cache` must come from a forward pass on this model with no
    /// parameter change in between.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache from generation {}, model at {}",
                cache.generation, self.generation
            )));
        }
        let expected = (cache.seqs.len(), self.config.n_classes);
        if dlogits.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected,
                got: dlogits.shape(),
            });
        }
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let bb = self.backbone_trainable;
        let n_layers = self.layers.len();

        let needs_dw: Vec<[bool; 4]> = self
            .layers
            .iter()
            .map(|l| [0, 1, 2, 3].map(|i| bb || matches!(l.attn.slots[i], Slot::Adapted(_))))
            .collect();
        let mut d_w: Vec<[Matrix; 4]> = (0..n_layers)
            .map(|_| [(); 4].map(|_| Matrix::zeros(d, d)))
            .collect();
        let mut d_embed = bb.then(|| Matrix::zeros(self.config.vocab_size, d));
        let mut d_ln1_g = vec![vec![0.0; d]; n_layers];
        let mut d_ln1_b = vec![vec![0.0; d]; n_layers];
        let mut d_ln2_g = vec![vec![0.0; d]; n_layers];
        let mut d_ln2_b = vec![vec![0.0; d]; n_layers];
        let mut d_ff1: Vec<Matrix> = self.layers.iter().map(|l| Matrix::zeros(d, l.ff1.cols())).collect();
        let mut d_ff1_b = vec![vec![0.0; self.config.d_ff]; n_layers];
        let mut d_ff2: Vec<Matrix> = self.layers.iter().map(|l| Matrix::zeros(l.ff2.rows(), d)).collect();
        let mut d_ff2_b = vec![vec![0.0; d]; n_layers];

        let d_head = cache.pooled.tr_matmul(dlogits)?;
        let mut d_head_b = vec![0.0; self.config.n_classes];
        col_sums_into(dlogits, &mut d_head_b);
        let d_pooled = dlogits.matmul_tr(&self.head)?;

        for (b, seq) in cache.seqs.iter().enumerate() {
            let n = seq.tokens.len();
            let inv_n = 1.0 / n as f64;
            let mut dx = Matrix::from_fn(n, d, |_, j| d_pooled[(b, j)] * inv_n);
            for (l, (layer, lc)) in self.layers.iter().zip(&seq.layers).enumerate().rev() {
                let w = &cache.weights[l];
                // Feed-forward block and second norm.
                let dr2 = layer_norm_backward(
                    &dx,
                    &lc.ln2,
                    &layer.ln2_gamma,
                    bb.then_some(d_ln2_g[l].as_mut_slice()),
                    bb.then_some(d_ln2_b[l].as_mut_slice()),
                );
                if bb {
                    d_ff2[l].add_assign(&lc.g.tr_matmul(&dr2)?)?;
                    col_sums_into(&dr2, &mut d_ff2_b[l]);
                }
                let dg = dr2.matmul_tr(&layer.ff2)?;
                let mut df1 = dg;
                for (v, &pre) in df1.as_mut_slice().iter_mut().zip(lc.f1.as_slice()) {
                    *v *= gelu_grad(pre);
                }
                if bb {
                    d_ff1[l].add_assign(&lc.y1.tr_matmul(&df1)?)?;
                    col_sums_into(&df1, &mut d_ff1_b[l]);
                }
                let mut dy1 = dr2;
                dy1.add_assign(&df1.matmul_tr(&layer.ff1)?)?;

                // Attention block and first norm.
                let dr1 = layer_norm_backward(
                    &dy1,
                    &lc.ln1,
                    &layer.ln1_gamma,
                    bb.then_some(d_ln1_g[l].as_mut_slice()),
                    bb.then_some(d_ln1_b[l].as_mut_slice()),
                );
                if needs_dw[l][3] {
                    d_w[l][3].add_assign(&lc.z.tr_matmul(&dr1)?)?;
                }
                let dz = dr1.matmul_tr(&w[3])?;
                let mut dq = Matrix::zeros(n, d);
                let mut dk = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                for (h, p) in lc.probs.iter().enumerate() {
                    let c0 = h * dh;
                    let dzh = dz.block(0, c0, n, dh);
                    let vh = lc.v.block(0, c0, n, dh);
                    let qh = lc.q.block(0, c0, n, dh);
                    let kh = lc.k.block(0, c0, n, dh);
                    let dp = dzh.matmul_tr(&vh)?;
                    write_block(&mut dv, &p.tr_matmul(&dzh)?, c0);
                    let mut ds = Matrix::zeros(n, n);
                    for i in 0..n {
                        let dot: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                        }
                    }
                    write_block(&mut dq, &ds.matmul(&kh)?, c0);
                    write_block(&mut dk, &ds.tr_matmul(&qh)?, c0);
                }
                for (idx, dproj) in [(0, &dq), (1, &dk), (2, &dv)] {
                    if needs_dw[l][idx] {
                        d_w[l][idx].add_assign(&lc.x_in.tr_matmul(dproj)?)?;
                    }
                }
                let mut dx_in = dr1;
                dx_in.add_assign(&dq.matmul_tr(&w[0])?)?;
                dx_in.add_assign(&dk.matmul_tr(&w[1])?)?;
                dx_in.add_assign(&dv.matmul_tr(&w[2])?)?;
                dx = dx_in;
            }
            if let Some(de) = d_embed.as_mut() {
                for (i, &t) in seq.tokens.iter().enumerate() {
                    for (acc, v) in de.row_mut(t).iter_mut().zip(dx.row(i)) {
                        *acc += v;
                    }
                }
            }
        }

        // Assemble in the order of `trainables_mut`.
        let mut entries = Vec::new();
        if let Some(de) = d_embed {
            entries.push(("embedding".to_string(), de.into_vec()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (p, slot) in Projection::ALL.iter().zip(&layer.attn.slots) {
                match slot {
                    Slot::Weight(_) if bb => entries.push((
                        qualified(l, &format!("attn.{p}.weight")),
                        d_w[l][p.index()].as_slice().to_vec(),
                    )),
                    Slot::Weight(_) => {}
                    Slot::Adapted(a) => {
                        for (name, g) in a.grad_trainables(&d_w[l][p.index()])? {
                            entries.push((qualified(l, &format!("attn.{p}.{name}")), g));
                        }
                    }
                }
            }
            if bb {
                entries.push((qualified(l, "ln1.gamma"), std::mem::take(&mut d_ln1_g[l])));
                entries.push((qualified(l, "ln1.beta"), std::mem::take(&mut d_ln1_b[l])));
                entries.push((qualified(l, "ff1.weight"), d_ff1[l].as_slice().to_vec()));
                entries.push((qualified(l, "ff1.bias"), std::mem::take(&mut d_ff1_b[l])));
                entries.push((qualified(l, "ff2.weight"), d_ff2[l].as_slice().to_vec()));
                entries.push((qualified(l, "ff2.bias"), std::mem::take(&mut d_ff2_b[l])));
                entries.push((qualified(l, "ln2.gamma"), std::mem::take(&mut d_ln2_g[l])));
                entries.push((qualified(l, "ln2.beta"), std::mem::take(&mut d_ln2_b[l])));
            }
        }
        entries.push(("head.weight".into(), d_head.into_vec()));
        entries.push(("head.bias".into(), d_head_b));
        Ok(Gradients { entries })
    }

    /// Logits only.
    pub fn predict(&self, batch: &[Vec<usize>]) -> Result<Matrix> {
        Ok(self.forward(batch)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterSpec, LayerScope};
    use crate::model::ops::cross_entropy;
    use crate::model::TinyTransformerConfig;
    use crate::rank::RankPolicy;

    fn toy() -> TransformerModel {
        TransformerModel::new(TinyTransformerConfig {
            vocab_size: 9,
            d_model: 4,
            n_heads: 2,
            n_layers: 2,
            d_ff: 6,
            max_seq_len: 5,
            n_classes: 2,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn attention_rows_are_distributions() {
        let m = toy();
        let out = m.forward(&[vec![1, 2, 3], vec![4, 5]]).unwrap();
        for s in 0..2 {
            for l in 0..2 {
                for h in 0..2 {
                    let p = out.cache.attention(s, l, h);
                    for i in 0..p.rows() {
                        assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn input_errors() {
        let m = toy();
        assert!(matches!(
            m.forward(&[vec![1, 9]]),
            Err(Error::TokenOutOfRange { token: 9, position: 1, .. })
        ));
        assert!(matches!(
            m.forward(&[vec![0; 6]]),
            Err(Error::SequenceTooLong { len: 6, max: 5 })
        ));
        assert!(m.forward(&[]).is_err());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = toy();
        let out = m.forward(&[vec![1, 2]]).unwrap();
        m.trainables_mut()[0].1[0] += 0.1;
        let d = Matrix::zeros(1, 2);
        assert!(matches!(m.backward(&out.cache, &d), Err(Error::StaleCache(_))));
        let out = m.forward(&[vec![1, 2]]).unwrap();
        assert!(m.backward(&out.cache, &Matrix::zeros(2, 2)).is_err());
        assert!(m.backward(&out.cache, &d).is_ok());
    }

    #[test]
    fn gradient_names_follow_trainables() {
        let spec = AdapterSpec::qr_lora(RankPolicy::Energy(0.5), LayerScope::All, &[Projection::Q, Projection::V]);
        let m = toy().inject_adapters(&spec).unwrap();
        let batch = [vec![1, 2, 3]];
        let out = m.forward(&batch).unwrap();
        let (_, dl) = cross_entropy(&out.logits, &[1]);
        let g = m.backward(&out.cache, &dl).unwrap();
        let names: Vec<_> = g.entries.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, m.trainable_names());
        assert_eq!(g.len_scalars(), m.adapter_trainable_count() + m.head_count());
    }

    fn loss_of(m: &TransformerModel, batch: &[Vec<usize>], labels: &[usize]) -> f64 {
        cross_entropy(&m.predict(batch).unwrap(), labels).0
    }

    #[test]
    fn backward_matches_central_differences() {
        let batch = [vec![1, 2, 3, 4], vec![5, 0], vec![8]];
        let labels = [1, 0, 1];
        for spec in [
            AdapterSpec::full_ft(),
            AdapterSpec::qr_lora(RankPolicy::Fixed(3), LayerScope::All, &Projection::ALL),
            AdapterSpec::lora(2, LayerScope::Last(1), &[Projection::Q, Projection::O]),
            AdapterSpec::svd_lora(2, 1, 2.0, LayerScope::All, &[Projection::K, Projection::V]),
        ] {
            let mut m = toy().inject_adapters(&spec).unwrap();
            for (i, (_, t)) in m.trainables_mut().into_iter().enumerate() {
                for (j, v) in t.iter_mut().enumerate() {
                    *v += 0.05 * (((i * 31 + j * 7) % 13) as f64 / 6.0 - 1.0);
                }
            }
            let out = m.forward(&batch).unwrap();
            let (_, dl) = cross_entropy(&out.logits, &labels);
            let g = m.backward(&out.cache, &dl).unwrap();
            for (k, (name, grad)) in g.entries.iter().enumerate() {
                for j in (0..grad.len()).step_by(3) {
                    let x0 = m.trainables_mut()[k].1[j];
                    let h = 1e-3 * x0.abs().max(1.0);
                    let mut at = |x: f64| {
                        m.trainables_mut()[k].1[j] = x;
                        loss_of(&m, &batch, &labels)
                    };
                    let fd = (at(x0 - 2.0 * h) - 8.0 * at(x0 - h) + 8.0 * at(x0 + h) - at(x0 + 2.0 * h))
                        / (12.0 * h);
                    at(x0);
                    let rel = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
                    assert!(rel < 1e-5, "{} {name}[{j}]: {} vs {fd}", spec.label(), grad[j]);
                }
            }
        }
    }
}
