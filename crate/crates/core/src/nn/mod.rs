//! Differentiable core and the two-stream encoder regressor.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use graph::{AttentionMode, Graph, Var};
pub use model::Model;
pub use params::{Gradients, ParamId, ParamSet};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    ProbSparse,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub distill: bool,
    pub dropout: f64,
    pub sparse_factor: usize,
    pub attention: AttentionKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            layers: 3,
            distill: true,
            dropout: 0.1,
            sparse_factor: 5,
            attention: AttentionKind::ProbSparse,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.sparse_factor == 0 {
            return Err(Error::invalid("layers, d_ff and sparse_factor must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn attention_mode(&self) -> AttentionMode {
        match self.attention {
            AttentionKind::Full => AttentionMode::Full,
            AttentionKind::ProbSparse => AttentionMode::ProbSparse {
                factor: self.sparse_factor,
            },
        }
    }

    /// Token count after each layer for an input of `len` tokens.
    pub fn token_counts(&self, len: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.layers);
        let mut l = len;
        for i in 0..self.layers {
            out.push(l);
            if self.distill && i + 1 < self.layers {
                if l < 2 {
                    return Err(Error::shape(format!("cannot distill a sequence of length {l}")));
                }
                l = (l - 1) / 2 + 1;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_rows: usize,
    pub clip_len: usize,
    pub encoder: EncoderConfig,
    pub mlp_hidden: usize,
    /// `false` drops the background stream entirely.
    pub two_stream: bool,
}

impl ModelConfig {
    pub fn new(input_rows: usize, clip_len: usize) -> Self {
        ModelConfig {
            input_rows,
            clip_len,
            encoder: EncoderConfig::default(),
            mlp_hidden: 64,
            two_stream: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.input_rows == 0 || self.clip_len == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("input_rows, clip_len and mlp_hidden must be positive"));
        }
        self.encoder.token_counts(self.clip_len)?;
        Ok(())
    }
}
