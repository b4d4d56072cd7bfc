//! A small post-LN transformer encoder with mean pooling and a linear
//! classifier, differentiated by hand.
//!
//! Row-vector convention: activations are `n × d` and a projection is
//! applied as `X · W`. Each attention projection sits in a [`Slot`] that
//! is either a plain weight or an adapter. Which tensors are trainable
//! depends on the injected [`AdapterSpec`]: full fine-tuning trains the
//! whole backbone, every other method trains only its adapters. The
//! classifier head is always trainable.

mod checkpoint;
mod forward;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use forward::{ForwardCache, ForwardOutput};

use crate::adapters::{Adapter, AdapterSpec, AnyAdapter, Method, ModelDims, Projection};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyTransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters of the task head.
    pub fn head_params(&self) -> usize {
        self.d_model * self.n_classes + self.n_classes
    }

    /// Every parameter of the base model.
    pub fn total_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + self.d_ff + d + 4 * d;
        self.vocab_size * d + self.n_layers * per_layer + self.head_params()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.n_layers,
            d_model: self.d_model,
            total_params: self.total_params(),
        }
    }
}

/// An attention projection: either a plain weight or a wrapped one.
#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Weight(Matrix),
    Adapted(AnyAdapter),
}

impl Slot {
    pub fn effective_weight(&self) -> Matrix {
        match self {
            Slot::Weight(w) => w.clone(),
            Slot::Adapted(a) => a.effective_weight(),
        }
    }

    pub fn adapter(&self) -> Option<&AnyAdapter> {
        match self {
            Slot::Adapted(a) => Some(a),
            Slot::Weight(_) => None,
        }
    }
}

/// Attention projections of one layer, indexed by [`Projection::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerWeights {
    pub slots: [Slot; 4],
}

impl AttentionLayerWeights {
    pub fn slot(&self, p: Projection) -> &Slot {
        &self.slots[p.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionLayerWeights,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ff1: Matrix,
    pub ff1_bias: Vec<f64>,
    pub ff2: Matrix,
    pub ff2_bias: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: TinyTransformerConfig,
    embedding: Matrix,
    positions: Matrix,
    layers: Vec<EncoderLayer>,
    head: Matrix,
    head_bias: Vec<f64>,
    backbone_trainable: bool,
    spec: Option<AdapterSpec>,
    generation: u64,
}

/// Gradient of every trainable tensor, in [`TransformerModel::trainable_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl Gradients {
    pub fn len_scalars(&self) -> usize {
        self.entries.iter().map(|(_, g)| g.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g.as_slice())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn qualified(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

impl TransformerModel {
    /// Randomly initialized base model; only the head is trainable.
    pub fn new(config: TinyTransformerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let proj = 1.0 / (d as f64).sqrt();
        let embedding = uniform(&mut rng, config.vocab_size, d, 1.0);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                attn: AttentionLayerWeights {
                    slots: [(); 4].map(|_| Slot::Weight(uniform(&mut rng, d, d, proj))),
                },
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                ff1: uniform(&mut rng, d, config.d_ff, proj),
                ff1_bias: vec![0.0; config.d_ff],
                ff2: uniform(&mut rng, config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt()),
                ff2_bias: vec![0.0; d],
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
            })
            .collect();
        let head = uniform(&mut rng, d, config.n_classes, proj);
        Ok(Self {
            positions: ops::sinusoidal_positions(config.max_seq_len, d),
            head_bias: vec![0.0; config.n_classes],
            config,
            embedding,
            layers,
            head,
            backbone_trainable: false,
            spec: None,
            generation: 0,
        })
    }

    pub fn config(&self) -> &TinyTransformerConfig {
        &self.config
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn head(&self) -> (&Matrix, &[f64]) {
        (&self.head, &self.head_bias)
    }

    pub fn spec(&self) -> Option<&AdapterSpec> {
        self.spec.as_ref()
    }

    pub fn backbone_trainable(&self) -> bool {
        self.backbone_trainable
    }

    /// Bumped on every mutable access to parameters; forward caches record it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Applies `spec` to this model.
    ///
    /// Full fine-tuning wraps nothing and makes every tensor trainable.
    /// Other methods wrap exactly the `layer_scope × projections` matrices
    /// and freeze the backbone. The head stays trainable in both cases.
    pub fn inject_adapters(mut self, spec: &AdapterSpec) -> Result<Self> {
        spec.validate(self.config.n_layers)?;
        if self.wrapped_count() > 0 {
            return Err(Error::InvalidSpec("model already carries adapters".into()));
        }
        let targets = spec.targets(self.config.n_layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9_7f4a_7c15);
        for (layer, proj) in targets {
            let slot = &mut self.layers[layer].attn.slots[proj.index()];
            let w0 = match slot {
                Slot::Weight(w) => w.clone(),
                Slot::Adapted(_) => unreachable!("checked above"),
            };
            *slot = Slot::Adapted(AnyAdapter::build(spec, &w0, &mut rng)?);
        }
        self.backbone_trainable = spec.method == Method::FullFt;
        self.spec = Some(spec.clone());
        self.generation += 1;
        Ok(self)
    }

    /// Adapted `(layer, projection)` pairs in canonical order.
    pub fn wrapped(&self) -> Vec<(usize, Projection)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for p in Projection::ALL {
                if matches!(layer.attn.slot(p), Slot::Adapted(_)) {
                    out.push((l, p));
                }
            }
        }
        out
    }

    pub fn wrapped_count(&self) -> usize {
        self.wrapped().len()
    }

    /// Selected rank of each QR-LoRA adapter, in [`TransformerModel::wrapped`] order.
    pub fn qr_ranks(&self) -> Vec<usize> {
        self.wrapped()
            .into_iter()
            .filter_map(|(l, p)| match self.layers[l].attn.slot(p) {
                Slot::Adapted(AnyAdapter::QrLora(a)) => Some(a.rank()),
                _ => None,
            })
            .collect()
    }

    /// Trainable scalars excluding the head.
    pub fn adapter_trainable_count(&self) -> usize {
        if self.backbone_trainable {
            return self.config.total_params();
        }
        self.layers
            .iter()
            .flat_map(|l| l.attn.slots.iter())
            .filter_map(Slot::adapter)
            .map(|a| a.trainable_count())
            .sum()
    }

    pub fn head_count(&self) -> usize {
        self.config.head_params()
    }

    /// Mutable views of every trainable tensor, in canonical order.
    pub fn trainables_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.generation += 1;
        let bb = self.backbone_trainable;
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if bb {
            out.push(("embedding".into(), self.embedding.as_mut_slice()));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (p, slot) in Projection::ALL.iter().zip(layer.attn.slots.iter_mut()) {
                match slot {
                    Slot::Weight(w) if bb => {
                        out.push((qualified(l, &format!("attn.{p}.weight")), w.as_mut_slice()))
                    }
                    Slot::Weight(_) => {}
                    Slot::Adapted(a) => {
                        for (name, t) in a.trainables_mut() {
                            out.push((qualified(l, &format!("attn.{p}.{name}")), t));
                        }
                    }
                }
            }
            if bb {
                out.push((qualified(l, "ln1.gamma"), &mut layer.ln1_gamma));
                out.push((qualified(l, "ln1.beta"), &mut layer.ln1_beta));
                out.push((qualified(l, "ff1.weight"), layer.ff1.as_mut_slice()));
                out.push((qualified(l, "ff1.bias"), &mut layer.ff1_bias));
                out.push((qualified(l, "ff2.weight"), layer.ff2.as_mut_slice()));
                out.push((qualified(l, "ff2.bias"), &mut layer.ff2_bias));
                out.push((qualified(l, "ln2.gamma"), &mut layer.ln2_gamma));
                out.push((qualified(l, "ln2.beta"), &mut layer.ln2_beta));
            }
        }
        out.push(("head.weight".into(), self.head.as_mut_slice()));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.clone()
            .trainables_mut()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// Named copies of every tensor that must not change under the active
    /// spec: the frozen backbone plus the frozen factors of each adapter.
    pub fn frozen_tensors(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let bb = self.backbone_trainable;
        if !bb {
            out.push(("embedding".into(), self.embedding.as_slice().to_vec()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (p, slot) in Projection::ALL.iter().zip(&layer.attn.slots) {
                let name = |part: &str| qualified(l, &format!("attn.{p}.{part}"));
                match slot {
                    Slot::Weight(w) if !bb => out.push((name("weight"), w.as_slice().to_vec())),
                    Slot::Weight(_) => {}
                    Slot::Adapted(a) => {
                        out.push((name("w0"), a.base().as_slice().to_vec()));
                        if let AnyAdapter::QrLora(q) = a {
                            out.push((name("q_basis"), q.q_basis().as_slice().to_vec()));
                            out.push((name("r_rows"), q.r_rows().as_slice().to_vec()));
                            out.push((name("perm"), q.perm().iter().map(|&p| p as f64).collect()));
                        }
                    }
                }
            }
            if !bb {
                out.push((qualified(l, "ln1.gamma"), layer.ln1_gamma.clone()));
                out.push((qualified(l, "ln1.beta"), layer.ln1_beta.clone()));
                out.push((qualified(l, "ff1.weight"), layer.ff1.as_slice().to_vec()));
                out.push((qualified(l, "ff1.bias"), layer.ff1_bias.clone()));
                out.push((qualified(l, "ff2.weight"), layer.ff2.as_slice().to_vec()));
                out.push((qualified(l, "ff2.bias"), layer.ff2_bias.clone()));
                out.push((qualified(l, "ln2.gamma"), layer.ln2_gamma.clone()));
                out.push((qualified(l, "ln2.beta"), layer.ln2_beta.clone()));
            }
        }
        out
    }
}
