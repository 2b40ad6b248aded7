//! Independent reference computations used by tests.
//!
//! Nothing here shares code paths with the functions it checks: gradients
//! are recovered by central differences of [`forward`] + [`loss`], and the
//! activity classifier reads raw pixel trajectories with hand-set rules.

use crate::ingest::LabeledSequence;
use crate::model::{forward, loss, Batch, ModelParams};
use crate::skeleton::NUM_FRAMES;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Loss of `params` on `batch` through the public forward path.
pub fn reference_loss(params: &ModelParams<f64>, batch: &Batch) -> f64 {
    loss(&forward(params, batch).expect("forward"), batch).expect("loss")
}

/// Relative error with a floor on the denominator, so entries where both
/// gradients are at round-off level compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference stencils.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error O(h^2).
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error O(h^4).
    FourPoint,
    /// `(f(x+3h) - 9f(x+2h) + 45f(x+h) - 45f(x-h) + 9f(x-2h) - f(x-3h)) / 60h`,
    /// error O(h^6).
    SixPoint,
}

/// Compare `analytic` against central differences with step `h` for every
/// entry of every tensor.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    analytic: &ModelParams<f64>,
    batch: &Batch,
    h: f64,
    floor: f64,
    stencil: Stencil,
) -> Vec<GradReport> {
    let mut work = params.clone();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.named().into_iter().map(|(_, t)| t.data.clone()).collect();
    let mut reports = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..len {
            let orig = work.named()[ti].1.data[i];
            let mut at = |offset: f64| {
                set(&mut work, ti, i, orig + offset);
                reference_loss(&work, batch)
            };
            let numeric = match stencil {
                Stencil::TwoPoint => (at(h) - at(-h)) / (2.0 * h),
                Stencil::FourPoint => (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h),
                Stencil::SixPoint => {
                    let mut d = |k: f64| at(k * h) - at(-k * h);
                    (45.0 * d(1.0) - 9.0 * d(2.0) + d(3.0)) / (60.0 * h)
                }
            };
            set(&mut work, ti, i, orig);
            let a = analytic[ti][i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(rel_err(a, numeric, floor));
        }
        reports.push(GradReport { name: name.clone(), entries: len, max_rel_err: max_rel, max_abs_err: max_abs });
    }
    reports
}

fn set(p: &mut ModelParams<f64>, tensor: usize, idx: usize, v: f64) {
    let mut named = p.named_mut();
    named[tensor].1.data[idx] = v;
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn track(f: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..NUM_FRAMES).map(f).collect()
}

/// Hand-written rule classifier over pixel trajectories of synthetic data.
///
/// Joint groups are averaged to suppress noise, then a fixed decision list
/// looks at which body parts move.
pub fn rule_classify(seq: &LabeledSequence) -> &'static str {
    let fr = &seq.seq.frames;
    let y = |f: usize, j: usize| fr[f].joints[j].y;
    let x = |f: usize, j: usize| fr[f].joints[j].x;
    let head = std_dev(&track(|f| (0..5).map(|j| y(f, j)).sum::<f64>() / 5.0));
    let ankles = std_dev(&track(|f| (y(f, 15) + y(f, 16)) / 2.0));
    let left_leg = std_dev(&track(|f| (y(f, 13) + y(f, 15)) / 2.0));
    let right_leg = std_dev(&track(|f| (y(f, 14) + y(f, 16)) / 2.0));
    let wrist_y = std_dev(&track(|f| y(f, 10)));
    let wrist_gap = std_dev(&track(|f| x(f, 9) - x(f, 10)));

    if head > 2.5 {
        if ankles > 3.0 {
            "jump"
        } else {
            "squat"
        }
    } else if left_leg.max(right_leg) > 3.0 {
        "march"
    } else if wrist_gap / 2f64.sqrt() > wrist_y {
        // The gap carries the noise of two wrists.
        "clap"
    } else {
        "wave"
    }
}

/// Overwrite every tensor with N(0, scale^2) draws; layernorm gains get
/// `1 + N(0, scale^2)`. Used to move gradient checks away from the
/// near-zero regime of the default initialization.
pub fn randomize<F: crate::model::Scalar>(params: &mut ModelParams<F>, seed: u64, scale: f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in params.named_mut() {
        let offset = if name.ends_with("gain") { 1.0 } else { 0.0 };
        for v in t.data.iter_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v = F::lit(offset + scale * z);
        }
    }
}

/// Log-probability of `continuation` after `prefix`, scored by one full
/// forward pass over the concatenation.
pub fn sequence_logprob(params: &ModelParams<f64>, prefix: &[u32], continuation: &[u32]) -> f64 {
    let mut ids = prefix.to_vec();
    ids.extend_from_slice(continuation);
    let logits = forward(params, &Batch::from_ids(&ids)).expect("forward");
    let mut total = 0.0;
    for (k, &tok) in continuation.iter().enumerate() {
        let row = logits.at(0, prefix.len() + k - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row[tok as usize] - lse;
    }
    total
}

/// Greedy decoding recomputed with a full forward pass per step.
pub fn greedy_by_full_forward(params: &ModelParams<f64>, prefix: &[u32], max_len: usize) -> Vec<u32> {
    let mut ids = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && ids.len() <= params.config.context_len {
        let logits = forward(params, &Batch::from_ids(&ids)).expect("forward");
        let row = logits.at(0, ids.len() - 1);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best as u32 == crate::codec::SEP {
            break;
        }
        out.push(best as u32);
        ids.push(best as u32);
        if ids.len() > params.config.context_len {
            break;
        }
    }
    out
}
