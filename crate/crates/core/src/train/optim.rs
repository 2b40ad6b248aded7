use super::{TrainConfig, TrainError};
use crate::model::{decays, ModelParams, Scalar};

/// Learning rate after `step` updates: linear warmup from zero, cosine decay
/// to `min_lr` at `max_steps`, then flat.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (w, m) = (cfg.warmup_steps, cfg.max_steps);
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    if step >= m {
        return cfg.min_lr;
    }
    let progress = (step - w) as f64 / (m - w) as f64;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over every gradient entry.
pub fn global_norm<F: Scalar>(grads: &ModelParams<F>) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.data.iter())
        .map(|g| {
            let g = g.to_f64().unwrap();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place so the global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<F: Scalar>(grads: &mut ModelParams<F>, clip_norm: f64) -> Result<f64, TrainError> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    if norm > clip_norm {
        let scale = F::lit(clip_norm / norm);
        for (_, t) in grads.named_mut() {
            t.data.iter_mut().for_each(|g| *g = *g * scale);
        }
    }
    Ok(norm)
}

/// AdamW moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<F> {
    pub step: u64,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Scalar> OptState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn all_finite(&self) -> bool {
        self.m.all_finite() && self.v.all_finite()
    }
}

/// One AdamW update with bias correction. Weight decay is decoupled and
/// applied only to tensors selected by [`decays`]. Nothing is modified if
/// the update would produce a non-finite value.
pub fn adamw_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptState<F>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let m_state = &mut state.m;
    let v_state = &mut state.v;

    let mut new_p = Vec::new();
    let mut new_m = Vec::new();
    let mut new_v = Vec::new();
    let grads = grads.named();
    let ms = m_state.named();
    let vs = v_state.named();
    for (i, (name, p)) in params.named().into_iter().enumerate() {
        let g = &grads[i].1.data;
        if g.len() != p.data.len() || ms[i].1.data.len() != p.data.len() || vs[i].1.data.len() != p.data.len() {
            return Err(TrainError::Shape(format!("gradient or moment shape mismatch for {name}")));
        }
        let decay = if decays(&name) { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let mut pn = Vec::with_capacity(p.data.len());
        let mut mn = Vec::with_capacity(p.data.len());
        let mut vn = Vec::with_capacity(p.data.len());
        for j in 0..p.data.len() {
            let gj = g[j].to_f64().unwrap();
            let m = cfg.beta1 * ms[i].1.data[j].to_f64().unwrap() + (1.0 - cfg.beta1) * gj;
            let v = cfg.beta2 * vs[i].1.data[j].to_f64().unwrap() + (1.0 - cfg.beta2) * gj * gj;
            let w = p.data[j].to_f64().unwrap() * decay - lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
            if !(w.is_finite() && m.is_finite() && v.is_finite()) {
                return Err(TrainError::NonFiniteUpdate { tensor: name });
            }
            pn.push(F::lit(w));
            mn.push(F::lit(m));
            vn.push(F::lit(v));
        }
        new_p.push(pn);
        new_m.push(mn);
        new_v.push(vn);
    }
    drop((grads, ms, vs));
    for ((_, t), d) in params.named_mut().into_iter().zip(new_p) {
        t.data = d;
    }
    for ((_, t), d) in m_state.named_mut().into_iter().zip(new_m) {
        t.data = d;
    }
    for ((_, t), d) in v_state.named_mut().into_iter().zip(new_v) {
        t.data = d;
    }
    state.step = t;
    Ok(())
}
