use rand::Rng;

use super::scalar::{gemm, View, ViewMut};
use super::{Batch, ModelError, ModelParams, Scalar};

pub(crate) const LN_EPS: f64 = 1e-5;
/// Query rows per causal attention block. Keys beyond a block's last row
/// are never multiplied.
const ATTN_BLOCK: usize = 64;

/// Next-token logits, `n x len x vocab`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub n: usize,
    pub len: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F> Logits<F> {
    pub fn at(&self, row: usize, pos: usize) -> &[F] {
        let o = (row * self.len + pos) * self.vocab;
        &self.data[o..o + self.vocab]
    }
}

pub(crate) struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) struct LayerCache<F> {
    pub ln1: LnCache<F>,
    pub h1: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    pub probs: Vec<F>,
    pub attn: Vec<F>,
    pub drop1: Option<Vec<F>>,
    pub ln2: LnCache<F>,
    pub h2: Vec<F>,
    pub u: Vec<F>,
    pub g: Vec<F>,
    pub drop2: Option<Vec<F>>,
}

pub(crate) struct ForwardCache<F> {
    pub layers: Vec<LayerCache<F>>,
    pub lnf: LnCache<F>,
    /// Final layernorm output, `n * len x d_model`.
    pub hf: Vec<F>,
}

pub(crate) fn layer_norm<F: Scalar>(x: &[F], d: usize, gain: &[F], bias: &[F], out: &mut [F]) -> LnCache<F> {
    let rows = x.len() / d;
    let eps = F::lit(LN_EPS);
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            xh[c] = (xr[c] - mean) * rs;
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
    LnCache { xhat, rstd }
}

/// `out = x * w (+ bias)` for row-major `x: rows x d_in`, `w: d_in x d_out`.
pub(crate) fn linear<F: Scalar>(x: &[F], d_in: usize, w: &[F], d_out: usize, bias: Option<&[F]>, out: &mut [F]) {
    let rows = x.len() / d_in;
    let beta = if let Some(b) = bias {
        for r in 0..rows {
            out[r * d_out..(r + 1) * d_out].copy_from_slice(b);
        }
        F::one()
    } else {
        F::zero()
    };
    gemm(F::one(), View::dense(x, rows, d_in), View::dense(w, d_in, d_out), beta, ViewMut::dense(out, rows, d_out));
}

fn gelu_consts<F: Scalar>() -> (F, F) {
    (F::lit((2.0 / std::f64::consts::PI).sqrt()), F::lit(0.044715))
}

/// Tanh-approximated GELU, evaluated through the identity
/// `0.5 x (1 + tanh z) = x * sigmoid(2z)`.
pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let (c, a) = gelu_consts::<F>();
    let two_z = F::lit(2.0) * c * (x + a * x * x * x);
    x / (F::one() + (-two_z).fast_exp())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, a) = gelu_consts::<F>();
    let two = F::lit(2.0);
    let s = F::one() / (F::one() + (-(two * c * (x + a * x * x * x))).fast_exp());
    s + x * s * (F::one() - s) * two * c * (F::one() + F::lit(3.0) * a * x * x)
}

/// Index one past the last non-padding position of each row.
pub(crate) fn valid_extent(pad: &[bool], n: usize, len: usize) -> Vec<usize> {
    (0..n)
        .map(|s| {
            let row = &pad[s * len..(s + 1) * len];
            row.iter().rposition(|&p| !p).map_or(0, |i| i + 1)
        })
        .collect()
}

/// Causal multi-head attention over `q, k, v: n*len x d`. Writes the
/// concatenated head outputs to `out` and the attention weights to `probs`
/// (`n x heads x len x len`, zero outside the attended set).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    pad: &[bool],
    n: usize,
    len: usize,
    d: usize,
    heads: usize,
    out: &mut [F],
    probs: &mut [F],
) {
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let extent = valid_extent(pad, n, len);
    for s in 0..n {
        let base = s * len * d;
        let row_pad = &pad[s * len..(s + 1) * len];
        for h in 0..heads {
            let col = h * dh;
            let pbase = (s * heads + h) * len * len;
            let mut r0 = 0;
            while r0 < len {
                let r1 = (r0 + ATTN_BLOCK).min(len);
                let rows = r1 - r0;
                let kmax = r1.min(extent[s]);
                if kmax == 0 {
                    for i in r0..r1 {
                        out[base + i * d + col..base + i * d + col + dh].iter_mut().for_each(|x| *x = F::zero());
                    }
                    r0 = r1;
                    continue;
                }
                gemm(
                    scale,
                    View::rows(q, base + r0 * d + col, rows, dh, d),
                    View::rows(k, base + col, kmax, dh, d).t(),
                    F::zero(),
                    ViewMut::rows(probs, pbase + r0 * len, rows, kmax, len),
                );
                for i in r0..r1 {
                    let row = &mut probs[pbase + i * len..pbase + i * len + kmax];
                    let lim = (i + 1).min(kmax);
                    let mut max = F::neg_infinity();
                    for j in 0..lim {
                        if !row_pad[j] && row[j] > max {
                            max = row[j];
                        }
                    }
                    if max == F::neg_infinity() {
                        row.iter_mut().for_each(|x| *x = F::zero());
                        continue;
                    }
                    row[lim..].iter_mut().for_each(|x| *x = F::zero());
                    for (x, &p) in row[..lim].iter_mut().zip(&row_pad[..lim]) {
                        let e = (*x - max).fast_exp();
                        *x = if p { F::zero() } else { e };
                    }
                    let sum = row[..lim].iter().copied().sum::<F>();
                    let inv = F::one() / sum;
                    row[..lim].iter_mut().for_each(|x| *x = *x * inv);
                }
                gemm(
                    F::one(),
                    View::rows(probs, pbase + r0 * len, rows, kmax, len),
                    View::rows(v, base + col, kmax, dh, d),
                    F::zero(),
                    ViewMut::rows(out, base + r0 * d + col, rows, dh, d),
                );
                r0 = r1;
            }
        }
    }
}

fn dropout_mask<F: Scalar, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::lit(1.0 / (1.0 - rate));
    (0..len).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect()
}

/// Run the decoder stack and keep every activation needed for backward.
pub(crate) fn forward_cached<F: Scalar, R: Rng>(
    params: &ModelParams<F>,
    batch: &Batch,
    mut dropout: Option<&mut R>,
) -> Result<ForwardCache<F>, ModelError> {
    let cfg = &params.config;
    batch.validate(cfg)?;
    let (n, len, d, ff, heads) = (batch.n, batch.len, cfg.d_model, cfg.d_ff, cfg.n_heads);
    let rows = n * len;
    let rate = cfg.dropout_rate;
    let use_dropout = rate > 0.0 && dropout.is_some();

    let mut x = vec![F::zero(); rows * d];
    for r in 0..rows {
        let id = batch.ids[r] as usize;
        let pos = r % len;
        let te = &params.tok_emb.data[id * d..(id + 1) * d];
        let pe = &params.pos_emb.data[pos * d..(pos + 1) * d];
        for c in 0..d {
            x[r * d + c] = te[c] + pe[c];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let mut h1 = vec![F::zero(); rows * d];
        let ln1 = layer_norm(&x, d, &lp.ln1_gain.data, &lp.ln1_bias.data, &mut h1);
        let mut q = vec![F::zero(); rows * d];
        let mut k = vec![F::zero(); rows * d];
        let mut v = vec![F::zero(); rows * d];
        linear(&h1, d, &lp.w_q.data, d, None, &mut q);
        linear(&h1, d, &lp.w_k.data, d, None, &mut k);
        linear(&h1, d, &lp.w_v.data, d, None, &mut v);
        let mut probs = vec![F::zero(); n * heads * len * len];
        let mut attn = vec![F::zero(); rows * d];
        attention_forward(&q, &k, &v, &batch.pad_mask, n, len, d, heads, &mut attn, &mut probs);
        let mut a = vec![F::zero(); rows * d];
        linear(&attn, d, &lp.w_o.data, d, None, &mut a);
        let drop1 = match dropout.as_deref_mut() {
            Some(rng) if use_dropout => Some(dropout_mask::<F, R>(rows * d, rate, rng)),
            _ => None,
        };
        match &drop1 {
            Some(m) => x.iter_mut().zip(&a).zip(m).for_each(|((x, &a), &m)| *x = *x + a * m),
            None => x.iter_mut().zip(&a).for_each(|(x, &a)| *x = *x + a),
        }

        let mut h2 = vec![F::zero(); rows * d];
        let ln2 = layer_norm(&x, d, &lp.ln2_gain.data, &lp.ln2_bias.data, &mut h2);
        let mut u = vec![F::zero(); rows * ff];
        linear(&h2, d, &lp.w_1.data, ff, Some(&lp.b_1.data), &mut u);
        let g: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
        let mut m = vec![F::zero(); rows * d];
        linear(&g, ff, &lp.w_2.data, d, Some(&lp.b_2.data), &mut m);
        let drop2 = match dropout.as_deref_mut() {
            Some(rng) if use_dropout => Some(dropout_mask::<F, R>(rows * d, rate, rng)),
            _ => None,
        };
        match &drop2 {
            Some(mask) => x.iter_mut().zip(&m).zip(mask).for_each(|((x, &m), &k)| *x = *x + m * k),
            None => x.iter_mut().zip(&m).for_each(|(x, &m)| *x = *x + m),
        }
        layers.push(LayerCache { ln1, h1, q, k, v, probs, attn, drop1, ln2, h2, u, g, drop2 });
    }

    let mut hf = vec![F::zero(); rows * d];
    let lnf = layer_norm(&x, d, &params.lnf_gain.data, &params.lnf_bias.data, &mut hf);
    Ok(ForwardCache { layers, lnf, hf })
}

/// `rows x d` hidden states times the transposed token embedding.
pub(crate) fn project_logits<F: Scalar>(params: &ModelParams<F>, hidden: &[F]) -> Vec<F> {
    let (d, vsz) = (params.config.d_model, params.config.vocab_size);
    let rows = hidden.len() / d;
    let mut out = vec![F::zero(); rows * vsz];
    gemm(
        F::one(),
        View::dense(hidden, rows, d),
        View::dense(&params.tok_emb.data, vsz, d).t(),
        F::zero(),
        ViewMut::dense(&mut out, rows, vsz),
    );
    out
}

/// Next-token logits at every position of every row. Dropout is never
/// applied here.
pub fn forward<F: Scalar>(params: &ModelParams<F>, batch: &Batch) -> Result<Logits<F>, ModelError> {
    let cache = forward_cached::<F, rand_chacha::ChaCha8Rng>(params, batch, None)?;
    Ok(Logits {
        n: batch.n,
        len: batch.len,
        vocab: params.config.vocab_size,
        data: project_logits(params, &cache.hf),
    })
}

/// Cross-entropy of one logit row against `target`, computed stably.
pub(crate) fn cross_entropy<F: Scalar>(row: &[F], target: usize) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if row[target] == F::infinity() {
        return F::zero();
    }
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
    lse - row[target]
}

/// Mean cross-entropy of the logits at `t - 1` against the token at `t`,
/// over every `t` with `target_mask[t]`.
pub fn loss<F: Scalar>(logits: &Logits<F>, batch: &Batch) -> Result<F, ModelError> {
    if logits.n != batch.n || logits.len != batch.len {
        return Err(ModelError::Shape(format!(
            "logits are {}x{}, batch is {}x{}",
            logits.n, logits.len, batch.n, batch.len
        )));
    }
    let targets = batch.targets();
    if targets.is_empty() {
        return Err(ModelError::NoTargets);
    }
    let mut total = 0.0f64;
    for &(r, t) in &targets {
        if t == 0 {
            return Err(ModelError::Shape("position 0 cannot be a target".into()));
        }
        let id = batch.ids[r * batch.len + t] as usize;
        if id >= logits.vocab {
            return Err(ModelError::TokenOutOfRange { id: id as u32, pos: t, vocab: logits.vocab });
        }
        total += cross_entropy(logits.at(r, t - 1), id).to_f64().unwrap();
    }
    Ok(F::lit(total / targets.len() as f64))
}
