use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Scalar};

/// Standard deviation of the initial embedding and projection weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self, ModelError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(ModelError::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(G::nan())).collect(),
        }
    }

    fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::lit(INIT_STD * z)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }
}

/// Weights of one pre-norm decoder block. Projection matrices are stored
/// `[in, out]` so activations multiply them from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Tensor<F>,
    pub ln1_bias: Tensor<F>,
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub ln2_gain: Tensor<F>,
    pub ln2_bias: Tensor<F>,
    pub w_1: Tensor<F>,
    pub b_1: Tensor<F>,
    pub w_2: Tensor<F>,
    pub b_2: Tensor<F>,
}

/// All transformer weights. The output projection is the transpose of
/// `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<F>,
    pub pos_emb: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_gain: Tensor<F>,
    pub lnf_bias: Tensor<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn with(cfg: &ModelConfig, mut mat: impl FnMut(&[usize]) -> Tensor<F>, ones: F) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        Self {
            ln1_gain: Tensor::filled(&[d], ones),
            ln1_bias: Tensor::zeros(&[d]),
            w_q: mat(&[d, d]),
            w_k: mat(&[d, d]),
            w_v: mat(&[d, d]),
            w_o: mat(&[d, d]),
            ln2_gain: Tensor::filled(&[d], ones),
            ln2_bias: Tensor::zeros(&[d]),
            w_1: mat(&[d, ff]),
            b_1: Tensor::zeros(&[ff]),
            w_2: mat(&[ff, d]),
            b_2: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.w_q", &self.w_q),
            ("attn.w_k", &self.w_k),
            ("attn.w_v", &self.w_v),
            ("attn.w_o", &self.w_o),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.w_1", &self.w_1),
            ("mlp.b_1", &self.b_1),
            ("mlp.w_2", &self.w_2),
            ("mlp.b_2", &self.b_2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("attn.w_q", &mut self.w_q),
            ("attn.w_k", &mut self.w_k),
            ("attn.w_v", &mut self.w_v),
            ("attn.w_o", &mut self.w_o),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("mlp.w_1", &mut self.w_1),
            ("mlp.b_1", &mut self.b_1),
            ("mlp.w_2", &mut self.w_2),
            ("mlp.b_2", &mut self.b_2),
        ]
    }
}

/// Whether a named parameter receives decoupled weight decay: weight
/// matrices and embeddings do, biases and layernorm parameters do not.
pub fn decays(name: &str) -> bool {
    name.ends_with("emb") || name.contains(".w_")
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh parameters: embeddings and projections ~ N(0, 0.02^2) drawn from
    /// `ChaCha8Rng::seed_from_u64(seed)` in [`ModelParams::named`] order,
    /// biases 0, layernorm gains 1.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok_emb = Tensor::normal(&[cfg.vocab_size, cfg.d_model], &mut rng);
        let pos_emb = Tensor::normal(&[cfg.context_len, cfg.d_model], &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams::with(cfg, |s| Tensor::normal(s, &mut rng), F::one()))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::filled(&[cfg.d_model], F::one()),
            lnf_bias: Tensor::zeros(&[cfg.d_model]),
        })
    }

    /// All-zero tensors with the shapes of `cfg` (used for gradients and
    /// optimizer moments).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            config: cfg.clone(),
            tok_emb: Tensor::zeros(&[cfg.vocab_size, cfg.d_model]),
            pos_emb: Tensor::zeros(&[cfg.context_len, cfg.d_model]),
            layers: (0..cfg.n_layers).map(|_| LayerParams::with(cfg, Tensor::zeros, F::zero())).collect(),
            lnf_gain: Tensor::zeros(&[cfg.d_model]),
            lnf_bias: Tensor::zeros(&[cfg.d_model]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.fields().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf.gain".into(), &self.lnf_gain));
        out.push(("lnf.bias".into(), &self.lnf_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out =
            vec![("tok_emb".to_string(), &mut self.tok_emb), ("pos_emb".to_string(), &mut self.pos_emb)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.fields_mut().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("lnf.gain".into(), &mut self.lnf_gain));
        out.push(("lnf.bias".into(), &mut self.lnf_bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_1: l.w_1.cast(),
                    b_1: l.b_1.cast(),
                    w_2: l.w_2.cast(),
                    b_2: l.b_2.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        }
    }

    /// Rebuild from named tensors (as produced by [`ModelParams::named`]).
    pub fn from_named(cfg: &ModelConfig, mut tensors: std::collections::HashMap<String, Tensor<F>>) -> Result<Self, ModelError> {
        let mut p = Self::zeros(cfg);
        for (name, slot) in p.named_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| ModelError::Shape(format!("missing tensor {name}")))?;
            if t.shape != slot.shape {
                return Err(ModelError::Shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, slot.shape
                )));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(p)
    }
}
