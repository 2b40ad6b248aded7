//! Reverse-mode gradients of the masked next-token loss.

use rand::Rng;

use super::forward::{cross_entropy, forward_cached, gelu_grad, valid_extent, LnCache};
use super::scalar::{gemm, View, ViewMut};
use super::{Batch, ModelError, ModelParams, Scalar};

const ATTN_BLOCK: usize = 64;

/// Loss and gradients for every parameter tensor, without dropout.
pub fn loss_and_grad<F: Scalar>(params: &ModelParams<F>, batch: &Batch) -> Result<(F, ModelParams<F>), ModelError> {
    loss_and_grad_impl::<F, rand_chacha::ChaCha8Rng>(params, batch, None)
}

/// As [`loss_and_grad`], sampling dropout masks from `rng` when the config
/// has a non-zero dropout rate.
pub fn loss_and_grad_with_dropout<F: Scalar, R: Rng>(
    params: &ModelParams<F>,
    batch: &Batch,
    rng: &mut R,
) -> Result<(F, ModelParams<F>), ModelError> {
    loss_and_grad_impl(params, batch, Some(rng))
}

fn col_sum_into<F: Scalar>(dy: &[F], cols: usize, acc: &mut [F]) {
    for row in dy.chunks_exact(cols) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
}

/// `dw += x^T * dy` for `x: rows x d_in`, `dy: rows x d_out`.
fn acc_weight_grad<F: Scalar>(x: &[F], d_in: usize, dy: &[F], d_out: usize, dw: &mut [F]) {
    let rows = x.len() / d_in;
    gemm(F::one(), View::dense(x, rows, d_in).t(), View::dense(dy, rows, d_out), F::one(), ViewMut::dense(dw, d_in, d_out));
}

/// `dx (+)= dy * w^T`.
fn input_grad<F: Scalar>(dy: &[F], d_out: usize, w: &[F], d_in: usize, beta: F, dx: &mut [F]) {
    let rows = dy.len() / d_out;
    gemm(F::one(), View::dense(dy, rows, d_out), View::dense(w, d_in, d_out).t(), beta, ViewMut::dense(dx, rows, d_in));
}

/// Backward through `y = xhat * gain + bias`; adds the input gradient into `dx`.
fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LnCache<F>,
    gain: &[F],
    d: usize,
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut dxhat = vec![F::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        if dyr.iter().all(|&g| g == F::zero()) {
            continue;
        }
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for c in 0..d {
            dgain[c] = dgain[c] + dyr[c] * xh[c];
            dbias[c] = dbias[c] + dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat = mean_dxhat + dxhat[c];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[c] * xh[c];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            dxr[c] = dxr[c] + rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    pad: &[bool],
    n: usize,
    len: usize,
    d: usize,
    heads: usize,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let extent = valid_extent(pad, n, len);
    let mut ds = vec![F::zero(); ATTN_BLOCK * len];
    for s in 0..n {
        let base = s * len * d;
        for h in 0..heads {
            let col = h * dh;
            let pbase = (s * heads + h) * len * len;
            let mut r0 = 0;
            while r0 < len {
                let r1 = (r0 + ATTN_BLOCK).min(len);
                let rows = r1 - r0;
                let kmax = r1.min(extent[s]);
                if kmax == 0 {
                    r0 = r1;
                    continue;
                }
                // dP = dO * V^T
                gemm(
                    F::one(),
                    View::rows(dout, base + r0 * d + col, rows, dh, d),
                    View::rows(v, base + col, kmax, dh, d).t(),
                    F::zero(),
                    ViewMut::dense(&mut ds[..rows * kmax], rows, kmax),
                );
                // dS = P * (dP - rowsum(P * dP))
                for i in 0..rows {
                    let p = &probs[pbase + (r0 + i) * len..pbase + (r0 + i) * len + kmax];
                    let row = &mut ds[i * kmax..(i + 1) * kmax];
                    let dot = p.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for (g, &pj) in row.iter_mut().zip(p) {
                        *g = if pj == F::zero() { F::zero() } else { pj * (*g - dot) };
                    }
                }
                let ds_view = View::dense(&ds[..rows * kmax], rows, kmax);
                gemm(
                    scale,
                    ds_view,
                    View::rows(k, base + col, kmax, dh, d),
                    F::zero(),
                    ViewMut::rows(dq, base + r0 * d + col, rows, dh, d),
                );
                gemm(
                    scale,
                    ds_view.t(),
                    View::rows(q, base + r0 * d + col, rows, dh, d),
                    F::one(),
                    ViewMut::rows(dk, base + col, kmax, dh, d),
                );
                gemm(
                    F::one(),
                    View::rows(probs, pbase + r0 * len, rows, kmax, len).t(),
                    View::rows(dout, base + r0 * d + col, rows, dh, d),
                    F::one(),
                    ViewMut::rows(dv, base + col, kmax, dh, d),
                );
                r0 = r1;
            }
        }
    }
}

fn loss_and_grad_impl<F: Scalar, R: Rng>(
    params: &ModelParams<F>,
    batch: &Batch,
    dropout: Option<&mut R>,
) -> Result<(F, ModelParams<F>), ModelError> {
    let cfg = &params.config;
    batch.validate(cfg)?;
    let targets = batch.targets();
    if targets.is_empty() {
        return Err(ModelError::NoTargets);
    }
    let cache = forward_cached(params, batch, dropout)?;
    let (n, len, d, ff, heads, vsz) = (batch.n, batch.len, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
    let rows = n * len;
    let mut grads = params.zeros_like();

    // Logits are only needed where a prediction is scored.
    let sel_rows: Vec<usize> = targets.iter().map(|&(r, t)| r * len + t - 1).collect();
    let mut hsel = vec![F::zero(); sel_rows.len() * d];
    for (i, &r) in sel_rows.iter().enumerate() {
        hsel[i * d..(i + 1) * d].copy_from_slice(&cache.hf[r * d..(r + 1) * d]);
    }
    let logits = super::forward::project_logits(params, &hsel);
    let count = F::from_usize(targets.len()).unwrap();
    let mut dlogits = vec![F::zero(); logits.len()];
    let mut total = 0.0f64;
    for (i, &(r, t)) in targets.iter().enumerate() {
        let target = batch.ids[r * len + t] as usize;
        let row = &logits[i * vsz..(i + 1) * vsz];
        total += cross_entropy(row, target).to_f64().unwrap();
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let drow = &mut dlogits[i * vsz..(i + 1) * vsz];
        for (j, g) in drow.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / sum;
            *g = (if j == target { p - F::one() } else { p }) / count;
        }
    }
    let loss = F::lit(total / targets.len() as f64);

    // Tied output projection: logits = hsel * E^T.
    acc_weight_grad(&dlogits, vsz, &hsel, d, &mut grads.tok_emb.data);
    let mut dhsel = vec![F::zero(); hsel.len()];
    gemm(
        F::one(),
        View::dense(&dlogits, sel_rows.len(), vsz),
        View::dense(&params.tok_emb.data, vsz, d),
        F::zero(),
        ViewMut::dense(&mut dhsel, sel_rows.len(), d),
    );
    let mut dhf = vec![F::zero(); rows * d];
    for (i, &r) in sel_rows.iter().enumerate() {
        for c in 0..d {
            dhf[r * d + c] = dhf[r * d + c] + dhsel[i * d + c];
        }
    }

    let mut dx = vec![F::zero(); rows * d];
    layer_norm_backward(
        &dhf,
        &cache.lnf,
        &params.lnf_gain.data,
        d,
        &mut grads.lnf_gain.data,
        &mut grads.lnf_bias.data,
        &mut dx,
    );

    for (li, lc) in cache.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let lg = &mut grads.layers[li];

        // MLP branch: x_out = x_mid + drop(g * W2 + b2)
        let dm: Vec<F> = match &lc.drop2 {
            Some(mask) => dx.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            None => dx.clone(),
        };
        col_sum_into(&dm, d, &mut lg.b_2.data);
        acc_weight_grad(&lc.g, ff, &dm, d, &mut lg.w_2.data);
        let mut du = vec![F::zero(); rows * ff];
        input_grad(&dm, d, &lp.w_2.data, ff, F::zero(), &mut du);
        for (g, &u) in du.iter_mut().zip(&lc.u) {
            *g = *g * gelu_grad(u);
        }
        col_sum_into(&du, ff, &mut lg.b_1.data);
        acc_weight_grad(&lc.h2, d, &du, ff, &mut lg.w_1.data);
        let mut dh2 = vec![F::zero(); rows * d];
        input_grad(&du, ff, &lp.w_1.data, d, F::zero(), &mut dh2);
        layer_norm_backward(&dh2, &lc.ln2, &lp.ln2_gain.data, d, &mut lg.ln2_gain.data, &mut lg.ln2_bias.data, &mut dx);

        // Attention branch: x_mid = x_in + drop(attn * Wo)
        let da: Vec<F> = match &lc.drop1 {
            Some(mask) => dx.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            None => dx.clone(),
        };
        acc_weight_grad(&lc.attn, d, &da, d, &mut lg.w_o.data);
        let mut dattn = vec![F::zero(); rows * d];
        input_grad(&da, d, &lp.w_o.data, d, F::zero(), &mut dattn);
        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        attention_backward(
            &lc.q, &lc.k, &lc.v, &lc.probs, &dattn, &batch.pad_mask, n, len, d, heads, &mut dq, &mut dk, &mut dv,
        );
        acc_weight_grad(&lc.h1, d, &dq, d, &mut lg.w_q.data);
        acc_weight_grad(&lc.h1, d, &dk, d, &mut lg.w_k.data);
        acc_weight_grad(&lc.h1, d, &dv, d, &mut lg.w_v.data);
        let mut dh1 = vec![F::zero(); rows * d];
        input_grad(&dq, d, &lp.w_q.data, d, F::zero(), &mut dh1);
        input_grad(&dk, d, &lp.w_k.data, d, F::one(), &mut dh1);
        input_grad(&dv, d, &lp.w_v.data, d, F::one(), &mut dh1);
        layer_norm_backward(&dh1, &lc.ln1, &lp.ln1_gain.data, d, &mut lg.ln1_gain.data, &mut lg.ln1_bias.data, &mut dx);
    }

    for r in 0..rows {
        let id = batch.ids[r] as usize;
        let pos = r % len;
        let g = &dx[r * d..(r + 1) * d];
        let te = &mut grads.tok_emb.data[id * d..(id + 1) * d];
        for c in 0..d {
            te[c] = te[c] + g[c];
        }
        let pe = &mut grads.pos_emb.data[pos * d..(pos + 1) * d];
        for c in 0..d {
            pe[c] = pe[c] + g[c];
        }
    }
    Ok((loss, grads))
}
