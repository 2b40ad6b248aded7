use super::forward::{forward_cached, gelu, layer_norm, linear, project_logits};
use super::{Batch, ModelError, ModelParams, Scalar};
use crate::codec::TokenId;

/// Cached keys and values for incremental single-sequence decoding.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Scalar> DecodeState<F> {
    /// Run the prompt and return the state plus the logits that predict the
    /// token after it.
    pub fn prefill(params: &ModelParams<F>, ids: &[TokenId]) -> Result<(Self, Vec<F>), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Shape("empty prompt".into()));
        }
        let batch = Batch::from_ids(ids);
        let cache = forward_cached::<F, rand_chacha::ChaCha8Rng>(params, &batch, None)?;
        let d = params.config.d_model;
        let last = &cache.hf[(ids.len() - 1) * d..ids.len() * d];
        let logits = project_logits(params, last);
        let (keys, values) = cache.layers.into_iter().map(|l| (l.k, l.v)).unzip();
        Ok((Self { keys, values, len: ids.len() }, logits))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append one token and return the logits for the next position.
    pub fn step(&mut self, params: &ModelParams<F>, token: TokenId) -> Result<Vec<F>, ModelError> {
        let cfg = &params.config;
        let pos = self.len;
        if pos >= cfg.context_len {
            return Err(ModelError::Shape(format!("context length {} exhausted", cfg.context_len)));
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, pos, vocab: cfg.vocab_size });
        }
        let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let t = token as usize;
        let mut x: Vec<F> = (0..d)
            .map(|c| params.tok_emb.data[t * d + c] + params.pos_emb.data[pos * d + c])
            .collect();
        let mut h = vec![F::zero(); d];
        let mut q = vec![F::zero(); d];
        let mut k = vec![F::zero(); d];
        let mut v = vec![F::zero(); d];
        let mut o = vec![F::zero(); d];
        let mut a = vec![F::zero(); d];
        let mut u = vec![F::zero(); ff];
        let mut m = vec![F::zero(); d];
        let mut scores = vec![F::zero(); pos + 1];
        for (li, lp) in params.layers.iter().enumerate() {
            layer_norm(&x, d, &lp.ln1_gain.data, &lp.ln1_bias.data, &mut h);
            linear(&h, d, &lp.w_q.data, d, None, &mut q);
            linear(&h, d, &lp.w_k.data, d, None, &mut k);
            linear(&h, d, &lp.w_v.data, d, None, &mut v);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            for hd in 0..heads {
                let col = hd * dh;
                let mut max = F::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let kr = &keys[j * d + col..j * d + col + dh];
                    *s = q[col..col + dh].iter().zip(kr).map(|(&a, &b)| a * b).sum::<F>() * scale;
                    max = max.max(*s);
                }
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).fast_exp();
                    sum = sum + *s;
                }
                let oh = &mut o[col..col + dh];
                oh.iter_mut().for_each(|x| *x = F::zero());
                for (j, &s) in scores.iter().enumerate() {
                    let w = s / sum;
                    for (c, out) in oh.iter_mut().enumerate() {
                        *out = *out + w * values[j * d + col + c];
                    }
                }
            }
            linear(&o, d, &lp.w_o.data, d, None, &mut a);
            x.iter_mut().zip(&a).for_each(|(x, &a)| *x = *x + a);
            layer_norm(&x, d, &lp.ln2_gain.data, &lp.ln2_bias.data, &mut h);
            linear(&h, d, &lp.w_1.data, ff, Some(&lp.b_1.data), &mut u);
            u.iter_mut().for_each(|x| *x = gelu(*x));
            linear(&u, ff, &lp.w_2.data, d, Some(&lp.b_2.data), &mut m);
            x.iter_mut().zip(&m).for_each(|(x, &m)| *x = *x + m);
        }
        layer_norm(&x, d, &params.lnf_gain.data, &params.lnf_bias.data, &mut h);
        self.len += 1;
        Ok(project_logits(params, &h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    #[test]
    fn incremental_matches_full_forward() {
        let cfg = ModelConfig { vocab_size: 20, context_len: 40, d_model: 16, n_heads: 4, n_layers: 2, d_ff: 32, dropout_rate: 0.0 };
        let p = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let ids: Vec<u32> = (0..30).map(|i| (i * 7 % 20) as u32).collect();
        let full = forward(&p, &Batch::from_ids(&ids)).unwrap();
        let (mut st, first) = DecodeState::prefill(&p, &ids[..25]).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10);
        assert!(close(&first, full.at(0, 24)));
        for t in 25..30 {
            let l = st.step(&p, ids[t]).unwrap();
            assert!(close(&l, full.at(0, t)), "position {t}");
        }
        assert_eq!(st.len(), 30);
    }

    #[test]
    fn context_is_bounded() {
        let cfg = ModelConfig { vocab_size: 8, context_len: 4, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 8, dropout_rate: 0.0 };
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        let (mut st, _) = DecodeState::prefill(&p, &[1, 2, 3]).unwrap();
        assert!(st.step(&p, 4).is_ok());
        assert!(st.step(&p, 4).is_err());
        assert!(DecodeState::prefill(&p, &[]).is_err());
    }
}
