//! From-scratch decoder-only transformer.
//!
//! Pre-norm blocks with learned positional embeddings, causal multi-head
//! attention, a GELU MLP, and an output projection tied to the token
//! embedding. Backpropagation is written out by hand in [`backward`]; the
//! forward pass is generic over [`Scalar`] so gradients can be checked in
//! double precision.

mod backward;
mod decode;
mod forward;
mod params;
mod scalar;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{TokenId, TokenSeq, PAD};

pub use backward::{loss_and_grad, loss_and_grad_with_dropout};
pub use decode::DecodeState;
pub use forward::{forward, loss, Logits};
pub use params::{decays, LayerParams, ModelParams, Tensor, INIT_STD};
pub use scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token id {id} at position {pos} is out of range for vocabulary size {vocab}")]
    TokenOutOfRange { id: TokenId, pos: usize, vocab: usize },
    #[error("batch has no target positions")]
    NoTargets,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 0, context_len: 384, d_model: 128, n_heads: 4, n_layers: 4, d_ff: 512, dropout_rate: 0.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.context_len == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("context_len, d_model, n_heads and d_ff must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A right-padded batch of `n` sequences of `len` positions each, stored
/// row-major. `pad_mask` is true at padding positions; padded keys are
/// excluded from attention and padded positions never carry targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub len: usize,
    pub ids: Vec<TokenId>,
    pub target_mask: Vec<bool>,
    pub pad_mask: Vec<bool>,
}

impl Batch {
    /// Pad `seqs` with `[PAD]` to `len` positions, or to the longest
    /// sequence when `len` is `None`.
    pub fn from_sequences<'a, I>(seqs: I, len: Option<usize>) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = &'a TokenSeq>,
    {
        let seqs: Vec<&TokenSeq> = seqs.into_iter().collect();
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let len = len.unwrap_or(longest);
        if longest > len {
            return Err(ModelError::Shape(format!("sequence of length {longest} exceeds batch length {len}")));
        }
        let n = seqs.len();
        let mut b = Batch {
            n,
            len,
            ids: vec![PAD; n * len],
            target_mask: vec![false; n * len],
            pad_mask: vec![true; n * len],
        };
        for (r, s) in seqs.iter().enumerate() {
            if s.target_mask.len() != s.ids.len() {
                return Err(ModelError::Shape("target_mask and ids differ in length".into()));
            }
            let o = r * len;
            b.ids[o..o + s.len()].copy_from_slice(&s.ids);
            b.target_mask[o..o + s.len()].copy_from_slice(&s.target_mask);
            b.pad_mask[o..o + s.len()].iter_mut().for_each(|p| *p = false);
        }
        Ok(b)
    }

    /// Single unpadded sequence of ids without targets.
    pub fn from_ids(ids: &[TokenId]) -> Self {
        Batch {
            n: 1,
            len: ids.len(),
            ids: ids.to_vec(),
            target_mask: vec![false; ids.len()],
            pad_mask: vec![false; ids.len()],
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let cells = self.n * self.len;
        if self.ids.len() != cells || self.target_mask.len() != cells || self.pad_mask.len() != cells {
            return Err(ModelError::Shape(format!("batch arrays must have n*len = {cells} entries")));
        }
        if self.n == 0 || self.len == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        if self.len > cfg.context_len {
            return Err(ModelError::Shape(format!(
                "batch length {} exceeds context length {}",
                self.len, cfg.context_len
            )));
        }
        if let Some(pos) = self.ids.iter().position(|&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id: self.ids[pos], pos, vocab: cfg.vocab_size });
        }
        for r in 0..self.n {
            let o = r * self.len;
            if self.target_mask[o] {
                return Err(ModelError::Shape("position 0 cannot be a target".into()));
            }
            for t in 0..self.len {
                if self.target_mask[o + t] && self.pad_mask[o + t] {
                    return Err(ModelError::Shape(format!("row {r} position {t} is both target and padding")));
                }
            }
        }
        Ok(())
    }

    /// `(row, position)` of every target, in row-major order.
    pub(crate) fn targets(&self) -> Vec<(usize, usize)> {
        (0..self.n * self.len)
            .filter(|&i| self.target_mask[i])
            .map(|i| (i / self.len, i % self.len))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = ModelConfig { vocab_size: 16, ..ModelConfig::default() };
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { d_model: 130, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 0, ..ok.clone() }.validate().is_err());
        assert!(ModelConfig { dropout_rate: 1.0, ..ok }.validate().is_err());
    }

    #[test]
    fn batch_padding() {
        let a = TokenSeq { ids: vec![1, 2, 3], target_mask: vec![false, false, true] };
        let b = TokenSeq { ids: vec![1, 2], target_mask: vec![false, true] };
        let batch = Batch::from_sequences([&a, &b], None).unwrap();
        assert_eq!(batch.len, 3);
        assert_eq!(batch.ids, vec![1, 2, 3, 1, 2, PAD]);
        assert_eq!(batch.pad_mask, vec![false, false, false, false, false, true]);
        assert_eq!(batch.targets(), vec![(0, 2), (1, 1)]);
        assert!(Batch::from_sequences([&a], Some(2)).is_err());
    }

    #[test]
    fn batch_validation() {
        let cfg = ModelConfig { vocab_size: 4, context_len: 3, ..ModelConfig::default() };
        let mut b = Batch::from_ids(&[1, 2, 3]);
        assert!(b.validate(&cfg).is_ok());
        b.ids[1] = 9;
        assert!(matches!(b.validate(&cfg), Err(ModelError::TokenOutOfRange { id: 9, pos: 1, .. })));
        let long = Batch::from_ids(&[1, 1, 1, 1]);
        assert!(matches!(long.validate(&cfg), Err(ModelError::Shape(_))));
    }
}
