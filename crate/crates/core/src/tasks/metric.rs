use serde::{Deserialize, Serialize};

use super::generators::TaskExample;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

/// Logit-difference metric `logits[position][answer] − logits[position][foil]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub answer: usize,
    pub foil: usize,
    pub position: usize,
}

impl MetricSpec {
    /// Metric at the final prompt position of the clean input.
    pub fn for_example(ex: &TaskExample) -> Self {
        Self {
            answer: ex.answer,
            foil: ex.foil,
            position: ex.clean.len() - 1,
        }
    }

    pub fn validate(&self, vocab_size: usize, seq_len: usize) -> Result<()> {
        if self.answer >= vocab_size || self.foil >= vocab_size {
            return Err(Error::Input(format!(
                "metric ids ({}, {}) out of range for vocabulary of {vocab_size}",
                self.answer, self.foil
            )));
        }
        if self.answer == self.foil {
            return Err(Error::Input("metric answer and foil must differ".into()));
        }
        if self.position >= seq_len {
            return Err(Error::Input(format!(
                "metric position {} outside sequence of length {seq_len}",
                self.position
            )));
        }
        Ok(())
    }
}

/// Logit difference between answer and foil at the metric position.
pub fn logit_diff<S: Scalar>(logits: &Tensor<S>, spec: &MetricSpec) -> S {
    let row = logits.row(spec.position);
    row[spec.answer] - row[spec.foil]
}
