use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MLP activation function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Gelu,
    Relu,
    /// Linear MLPs; used to build models on which first-order attribution is exact.
    Identity,
}

/// Normalisation applied before each sublayer and before unembedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LayerNorm,
    RmsNorm,
    None,
}

/// Shape of a pre-norm decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub nonlinearity: Nonlinearity,
    pub norm: Norm,
}

impl ModelConfig {
    /// 4 layers × 8 heads, `d_model = 128`, `d_mlp = 512`: 36 components.
    pub fn desk(vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_head: 16,
            d_mlp: 512,
            vocab_size,
            max_seq_len,
            nonlinearity: Nonlinearity::Gelu,
            norm: Norm::LayerNorm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("model.{name} must be positive")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Input(format!(
                "model: n_heads ({}) × d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.n_layers * (self.n_heads + 1)
    }
}
