//! Model checkpoint layout, integers little-endian:
//!
//! ```text
//! magic        b"QRLM"
//! version      u32 = 1
//! manifest_len u64, then manifest JSON
//! tensors      one matrix container per manifest entry, in order
//! ```
//!
//! Vectors (biases, norm parameters, λ, permutations) are stored as
//! `1 × n` matrices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterSpec, AnyAdapter, FullWeight, LoraAdapter, Method, QrLoraAdapter};
use crate::error::{Error, Result};
use crate::io::{read_matrix, read_u32, read_u64, write_matrix};
use crate::linalg::Matrix;
use crate::model::{ops, AttentionLayerWeights, EncoderLayer, Slot, TinyTransformerConfig, TransformerModel};

pub const MODEL_MAGIC: &[u8; 4] = b"QRLM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: TinyTransformerConfig,
    backbone_trainable: bool,
    spec: Option<AdapterSpec>,
    /// One entry per attention slot, layer-major, in q, k, v, o order.
    slots: Vec<SlotKind>,
    tensors: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SlotKind {
    Weight,
    QrLora,
    Lora { method: Method, scaling: f64 },
    Full,
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("non-empty finite vector")
}

struct Writer {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl Writer {
    fn push(&mut self, name: String, m: Matrix) {
        self.names.push(name);
        self.tensors.push(m);
    }
}

pub fn write_model(w: &mut impl Write, model: &TransformerModel) -> Result<()> {
    let mut out = Writer {
        names: Vec::new(),
        tensors: Vec::new(),
    };
    let mut slots = Vec::new();
    out.push("embedding".into(), model.embedding.clone());
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, slot) in layer.attn.slots.iter().enumerate() {
            let base = format!("layers.{l}.attn.{i}");
            match slot {
                Slot::Weight(m) => {
                    slots.push(SlotKind::Weight);
                    out.push(format!("{base}.weight"), m.clone());
                }
                Slot::Adapted(AnyAdapter::QrLora(a)) => {
                    slots.push(SlotKind::QrLora);
                    out.push(format!("{base}.w0"), a.w0().clone());
                    out.push(format!("{base}.q_basis"), a.q_basis().clone());
                    out.push(format!("{base}.r_rows"), a.r_rows().clone());
                    let perm: Vec<f64> = a.perm().iter().map(|&p| p as f64).collect();
                    out.push(format!("{base}.perm"), row(&perm));
                    out.push(format!("{base}.lambda"), row(a.lambda()));
                }
                Slot::Adapted(AnyAdapter::Lora(a)) => {
                    slots.push(SlotKind::Lora {
                        method: a.method(),
                        scaling: a.scaling(),
                    });
                    out.push(format!("{base}.w0"), a.base().clone());
                    out.push(format!("{base}.lora_b"), a.b().clone());
                    out.push(format!("{base}.lora_a"), a.a().clone());
                }
                Slot::Adapted(AnyAdapter::Full(a)) => {
                    slots.push(SlotKind::Full);
                    out.push(format!("{base}.w0"), a.base().clone());
                    out.push(format!("{base}.weight"), a.weight().clone());
                }
            }
        }
        out.push(format!("layers.{l}.ln1.gamma"), row(&layer.ln1_gamma));
        out.push(format!("layers.{l}.ln1.beta"), row(&layer.ln1_beta));
        out.push(format!("layers.{l}.ff1.weight"), layer.ff1.clone());
        out.push(format!("layers.{l}.ff1.bias"), row(&layer.ff1_bias));
        out.push(format!("layers.{l}.ff2.weight"), layer.ff2.clone());
        out.push(format!("layers.{l}.ff2.bias"), row(&layer.ff2_bias));
        out.push(format!("layers.{l}.ln2.gamma"), row(&layer.ln2_gamma));
        out.push(format!("layers.{l}.ln2.beta"), row(&layer.ln2_beta));
    }
    out.push("head.weight".into(), model.head.clone());
    out.push("head.bias".into(), row(&model.head_bias));

    let manifest = Manifest {
        config: model.config.clone(),
        backbone_trainable: model.backbone_trainable,
        spec: model.spec.clone(),
        slots,
        tensors: out.names,
    };
    let json = serde_json::to_vec(&manifest)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in &out.tensors {
        write_matrix(w, t)?;
    }
    Ok(())
}

struct Reader<'a, R> {
    r: &'a mut R,
    names: std::vec::IntoIter<String>,
}

impl<R: Read> Reader<'_, R> {
    fn next(&mut self, expected: &str) -> Result<Matrix> {
        let name = self
            .names
            .next()
            .ok_or_else(|| Error::Format(format!("manifest ends before `{expected}`")))?;
        if name != expected {
            return Err(Error::Format(format!("expected tensor `{expected}`, found `{name}`")));
        }
        read_matrix(self.r)
    }

    fn shaped(&mut self, expected: &str, shape: (usize, usize)) -> Result<Matrix> {
        let m = self.next(expected)?;
        if m.shape() != shape {
            return Err(Error::Format(format!(
                "tensor `{expected}` has shape {:?}, expected {shape:?}",
                m.shape()
            )));
        }
        Ok(m)
    }

    fn vector(&mut self, expected: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self.shaped(expected, (1, len))?.into_vec())
    }
}

pub fn read_model(r: &mut impl Read) -> Result<TransformerModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let len = read_u64(r)?;
    if len > 1 << 30 {
        return Err(Error::Format(format!("implausible manifest length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let cfg = manifest.config;
    cfg.validate()?;
    if manifest.slots.len() != 4 * cfg.n_layers {
        return Err(Error::Format("slot list does not match depth".into()));
    }
    let d = cfg.d_model;
    let mut rd = Reader {
        r,
        names: manifest.tensors.into_iter(),
    };
    let embedding = rd.shaped("embedding", (cfg.vocab_size, d))?;
    let mut kinds = manifest.slots.into_iter();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let mut slots = Vec::with_capacity(4);
        for i in 0..4 {
            let base = format!("layers.{l}.attn.{i}");
            let slot = match kinds.next().expect("length checked") {
                SlotKind::Weight => Slot::Weight(rd.shaped(&format!("{base}.weight"), (d, d))?),
                SlotKind::QrLora => {
                    let w0 = rd.shaped(&format!("{base}.w0"), (d, d))?;
                    let q = rd.next(&format!("{base}.q_basis"))?;
                    let rr = rd.next(&format!("{base}.r_rows"))?;
                    let perm = rd
                        .vector(&format!("{base}.perm"), d)?
                        .into_iter()
                        .map(|p| p as usize)
                        .collect();
                    let lambda = rd.next(&format!("{base}.lambda"))?.into_vec();
                    Slot::Adapted(AnyAdapter::QrLora(QrLoraAdapter::from_parts(
                        w0, q, rr, perm, lambda,
                    )?))
                }
                SlotKind::Lora { method, scaling } => {
                    let w0 = rd.shaped(&format!("{base}.w0"), (d, d))?;
                    let b = rd.next(&format!("{base}.lora_b"))?;
                    let a = rd.next(&format!("{base}.lora_a"))?;
                    Slot::Adapted(AnyAdapter::Lora(LoraAdapter::from_parts(
                        w0, b, a, scaling, method,
                    )?))
                }
                SlotKind::Full => {
                    let w0 = rd.shaped(&format!("{base}.w0"), (d, d))?;
                    let w = rd.shaped(&format!("{base}.weight"), (d, d))?;
                    Slot::Adapted(AnyAdapter::Full(FullWeight::from_parts(w0, w)?))
                }
            };
            slots.push(slot);
        }
        let slots: [Slot; 4] = slots.try_into().expect("four slots");
        layers.push(EncoderLayer {
            attn: AttentionLayerWeights { slots },
            ln1_gamma: rd.vector(&format!("layers.{l}.ln1.gamma"), d)?,
            ln1_beta: rd.vector(&format!("layers.{l}.ln1.beta"), d)?,
            ff1: rd.shaped(&format!("layers.{l}.ff1.weight"), (d, cfg.d_ff))?,
            ff1_bias: rd.vector(&format!("layers.{l}.ff1.bias"), cfg.d_ff)?,
            ff2: rd.shaped(&format!("layers.{l}.ff2.weight"), (cfg.d_ff, d))?,
            ff2_bias: rd.vector(&format!("layers.{l}.ff2.bias"), d)?,
            ln2_gamma: rd.vector(&format!("layers.{l}.ln2.gamma"), d)?,
            ln2_beta: rd.vector(&format!("layers.{l}.ln2.beta"), d)?,
        });
    }
    let head = rd.shaped("head.weight", (d, cfg.n_classes))?;
    let head_bias = rd.vector("head.bias", cfg.n_classes)?;
    if rd.names.next().is_some() {
        return Err(Error::Format("manifest lists unread tensors".into()));
    }
    Ok(TransformerModel {
        positions: ops::sinusoidal_positions(cfg.max_seq_len, d),
        config: cfg,
        embedding,
        layers,
        head,
        head_bias,
        backbone_trainable: manifest.backbone_trainable,
        spec: manifest.spec,
        generation: 0,
    })
}

pub fn save_model(path: &Path, model: &TransformerModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TransformerModel> {
    read_model(&mut BufReader::new(File::open(path)?))
}
