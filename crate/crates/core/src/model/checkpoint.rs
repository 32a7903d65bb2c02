//! Model weights and the checkpoint file format.
//!
//! A checkpoint file is laid out as:
//!
//! ```text
//! magic      8 bytes   b"CRCKPT\0\x01"
//! header_len u64 LE
//! header     header_len bytes of UTF-8 JSON (config, counters, seed,
//!            provenance, tensor table [{name, shape}])
//! payload    every tensor of the table, in order, as row-major f64 LE
//! ```
//!
//! Values are always stored as 64-bit floats, so `f64` checkpoints round-trip
//! bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, SeedTree, Tensor};

const MAGIC: &[u8; 8] = b"CRCKPT\0\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<S> {
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    /// `[d_model, n_heads·d_head]`; head `h` owns columns `h·d_head..(h+1)·d_head`.
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    /// `[n_heads·d_head, d_model]`; head `h` owns rows `h·d_head..(h+1)·d_head`.
    pub w_o: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub w_in: Tensor<S>,
    pub b_in: Tensor<S>,
    pub w_out: Tensor<S>,
    pub b_out: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<S> {
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub lnf_gain: Tensor<S>,
    pub lnf_bias: Tensor<S>,
    pub w_unembed: Tensor<S>,
}

const LAYER_PARAMS: [&str; 12] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_in", "b_in", "w_out",
    "b_out",
];

/// Names and shapes of every parameter, in storage order.
pub fn param_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let hd = config.n_heads * config.d_head;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
    ];
    for l in 0..config.n_layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, hd],
            vec![d, hd],
            vec![d, hd],
            vec![hd, d],
            vec![d],
            vec![d],
            vec![d, config.d_mlp],
            vec![config.d_mlp],
            vec![config.d_mlp, d],
            vec![d],
        ];
        for (name, shape) in LAYER_PARAMS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("lnf_gain".to_string(), vec![d]));
    out.push(("lnf_bias".to_string(), vec![d]));
    out.push(("w_unembed".to_string(), vec![d, config.vocab_size]));
    out
}

impl<S: Scalar> Weights<S> {
    /// Parameters in [`param_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.w_q,
                &l.w_k,
                &l.w_v,
                &l.w_o,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w_in,
                &l.b_in,
                &l.w_out,
                &l.b_out,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_unembed]);
        out
    }

    /// Inverse of [`Weights::tensors`]; shapes are checked against `config`.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let layout = param_layout(config);
        if layout.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: next(),
                ln1_bias: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            });
        }
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: next(),
            lnf_bias: next(),
            w_unembed: next(),
        })
    }

    /// Standard small-init: `N(0, 0.02²)` matrices, residual-output matrices
    /// shrunk by `1/sqrt(2·n_layers)`, unit gains and zero biases.
    pub fn init(config: &ModelConfig, seeds: &SeedTree) -> Self {
        let std = 0.02;
        let out_std = std / ((2 * config.n_layers) as f64).sqrt();
        let tensors = param_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let mut rng = seeds.child(&name).rng();
                let leaf = name.rsplit('.').next().unwrap_or(&name);
                match leaf {
                    "ln1_gain" | "ln2_gain" | "lnf_gain" => Tensor::ones(&shape),
                    "ln1_bias" | "ln2_bias" | "lnf_bias" | "b_in" | "b_out" => Tensor::zeros(&shape),
                    "w_o" | "w_out" => Tensor::randn(&shape, out_std, &mut rng),
                    _ => Tensor::randn(&shape, std, &mut rng),
                }
            })
            .collect();
        Self::from_tensors(config, tensors).expect("layout is self-consistent")
    }

    /// Every parameter drawn from `N(0, std²)`, with gains centred on 1.
    /// Produces sharp attention patterns and large activations, which the
    /// small init deliberately avoids.
    pub fn random(config: &ModelConfig, seeds: &SeedTree, std: f64) -> Self {
        let tensors = param_layout(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = Tensor::randn(&shape, std, &mut seeds.child(&name).rng());
                if name.ends_with("gain") {
                    t.map(|v| v + S::one())
                } else {
                    t
                }
            })
            .collect();
        Self::from_tensors(config, tensors).expect("layout is self-consistent")
    }

    /// Every parameter set to zero.
    pub fn zeros(config: &ModelConfig) -> Self {
        let tensors = param_layout(config)
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(&shape))
            .collect();
        Self::from_tensors(config, tensors).expect("layout is self-consistent")
    }

    pub fn map(&self, config: &ModelConfig, f: impl Fn(&str, &Tensor<S>) -> Tensor<S>) -> Self {
        let tensors = param_layout(config)
            .iter()
            .zip(self.tensors())
            .map(|((name, _), t)| f(name, t))
            .collect();
        Self::from_tensors(config, tensors).expect("map preserves shapes")
    }

    pub fn cast<T: Scalar>(&self, config: &ModelConfig) -> Weights<T> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| {
                Tensor::new(
                    t.shape().to_vec(),
                    t.data()
                        .iter()
                        .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
                        .collect(),
                )
                .expect("same length")
            })
            .collect();
        Weights::from_tensors(config, tensors).expect("cast preserves shapes")
    }
}

/// A model snapshot: config, weights, training counters and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub weights: Weights<S>,
    pub step: u64,
    pub tokens_seen: u64,
    pub seed: u64,
    /// Free-form key/value metadata written into the file header.
    pub provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    step: u64,
    tokens_seen: u64,
    seed: u64,
    provenance: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Freshly initialised weights at step 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config, &SeedTree::new(seed).child("init"));
        Ok(Self {
            config,
            weights,
            step: 0,
            tokens_seen: 0,
            seed,
            provenance: BTreeMap::new(),
        })
    }

    /// Short identifier used in output paths, e.g. `step-000500`.
    pub fn id(&self) -> String {
        format!("step-{:06}", self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = param_layout(&self.config);
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            step: self.step,
            tokens_seen: self.tokens_seen,
            seed: self.seed,
            provenance: self.provenance.clone(),
            tensors: layout
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let n_values: usize = self.weights.tensors().iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.weights.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        header.config.validate()?;
        let layout = param_layout(&header.config);
        let names_match = layout.len() == header.tensors.len()
            && layout
                .iter()
                .zip(&header.tensors)
                .all(|((n, s), e)| *n == e.name && *s == e.shape);
        if !names_match {
            return Err(Error::Format("tensor table does not match config".into()));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            if r.len() < 8 * n {
                return Err(Error::Format(format!("truncated tensor {}", entry.name)));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            r = &r[8 * n..];
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            weights: Weights::from_tensors(&header.config, tensors)?,
            config: header.config,
            step: header.step,
            tokens_seen: header.tokens_seen,
            seed: header.seed,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
