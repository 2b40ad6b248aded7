use kplm_core::codec::TokenSeq;
use kplm_core::model::{forward, loss_and_grad, loss_and_grad_with_dropout, Batch, ModelConfig, ModelParams};
use kplm_core::oracle::{finite_difference_check, randomize, reference_loss, Stencil};
use kplm_core::train::{adamw_step, clip_gradients, lr_at, OptState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> ModelConfig {
    ModelConfig { vocab_size: 16, context_len: 12, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 32, dropout_rate: 0.0 }
}

fn seq(ids: &[u32], first_target: usize) -> TokenSeq {
    TokenSeq { ids: ids.to_vec(), target_mask: (0..ids.len()).map(|i| i >= first_target).collect() }
}

fn tiny_batch() -> Batch {
    let a = seq(&[1, 6, 9, 12, 7, 3, 14, 4, 2, 11, 5, 13], 6);
    let b = seq(&[1, 8, 8, 10, 3, 15, 4], 5);
    let c = seq(&[1, 2, 3, 0, 9, 4, 7, 7, 12], 3);
    Batch::from_sequences([&a, &b, &c], None).unwrap()
}

/// Step 1e-3 with the O(h^6) central stencil. At the default initialization
/// a 1e-3 step is a few percent of the layernorm input scale, and the
/// lower-order stencils carry truncation errors above 1e-4.
#[test]
fn gradients_match_central_differences() {
    let batch = tiny_batch();
    for (seed, scale) in [(0u64, 0.0), (11, 0.0), (12, 0.5)] {
        let mut p = ModelParams::<f64>::init(&tiny_cfg(), seed).unwrap();
        if scale > 0.0 {
            randomize(&mut p, seed, scale);
        }
        let (l, grads) = loss_and_grad(&p, &batch).unwrap();
        assert!((l - reference_loss(&p, &batch)).abs() < 1e-12);
        let reports = finite_difference_check(&p, &grads, &batch, 1e-3, 1e-8, Stencil::SixPoint);
        assert_eq!(reports.len(), 2 + 12 + 2);
        for r in &reports {
            assert!(r.max_rel_err <= 1e-4, "seed {seed}: {}: max relative error {:.3e} (abs {:.3e})", r.name, r.max_rel_err, r.max_abs_err);
        }
    }
}

#[test]
fn dropout_gradients_match_differences_of_the_same_mask() {
    let cfg = ModelConfig { dropout_rate: 0.3, ..tiny_cfg() };
    let mut p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    randomize(&mut p, 4, 0.5);
    let batch = tiny_batch();
    let (l, g) = loss_and_grad_with_dropout(&p, &batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let lossf = |q: &ModelParams<f64>| loss_and_grad_with_dropout(q, &batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
    assert_eq!(lossf(&p), l);
    let h = 1e-4;
    for (ti, idx) in [(4usize, 3usize), (7, 10), (12, 5), (0, 20)] {
        let mut up = p.clone();
        up.named_mut()[ti].1.data[idx] += h;
        let mut down = p.clone();
        down.named_mut()[ti].1.data[idx] -= h;
        let fd = (lossf(&up) - lossf(&down)) / (2.0 * h);
        let a = g.named()[ti].1.data[idx];
        assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "tensor {ti} entry {idx}: {a} vs {fd}");
    }
}

#[test]
fn causal_logits_unchanged_by_later_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfgs = [
        tiny_cfg(),
        ModelConfig { vocab_size: 40, context_len: 140, d_model: 16, n_heads: 4, n_layers: 2, d_ff: 24, dropout_rate: 0.0 },
    ];
    for trial in 0..100 {
        let cfg = &cfgs[trial % 2];
        let p = ModelParams::<f32>::init(cfg, trial as u64).unwrap();
        let n = rng.gen_range(1..4);
        let len = rng.gen_range(2..=cfg.context_len);
        let ids: Vec<u32> = (0..n * len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let batch = Batch { n, len, ids, target_mask: vec![false; n * len], pad_mask: vec![false; n * len] };
        let base = forward(&p, &batch).unwrap();
        let row = rng.gen_range(0..n);
        let t = rng.gen_range(0..len - 1);
        let mut changed = batch.clone();
        let cell = row * len + t + 1;
        changed.ids[cell] = (changed.ids[cell] + 1) % cfg.vocab_size as u32;
        let after = forward(&p, &changed).unwrap();
        for r in 0..n {
            let upto = if r == row { t + 1 } else { len };
            for pos in 0..upto {
                let same = base.at(r, pos).iter().zip(after.at(r, pos)).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "trial {trial}: row {r} position {pos} changed after editing position {}", t + 1);
            }
        }
    }
}

#[test]
fn no_gradient_flows_from_positions_after_the_last_target() {
    let mut p = ModelParams::<f64>::init(&tiny_cfg(), 5).unwrap();
    randomize(&mut p, 6, 0.4);
    let ids = [1u32, 6, 9, 12, 7, 3, 14, 4, 2, 11, 5, 13];
    let mask: Vec<bool> = (0..12).map(|i| i == 5 || i == 6).collect();
    let batch = Batch::from_sequences([&TokenSeq { ids: ids.to_vec(), target_mask: mask }], None).unwrap();
    let (l, g) = loss_and_grad(&p, &batch).unwrap();
    for pos in 7..12 {
        assert!(g.pos_emb.data[pos * 8..(pos + 1) * 8].iter().all(|&v| v == 0.0), "position {pos}");
    }
    let mut edited = batch.clone();
    for c in &mut edited.ids[7..] {
        *c = 15 - *c;
    }
    assert_eq!(loss_and_grad(&p, &edited).unwrap().0, l);
}

#[test]
fn padding_does_not_change_loss_or_gradients() {
    let mut p = ModelParams::<f64>::init(&tiny_cfg(), 8).unwrap();
    randomize(&mut p, 9, 0.4);
    let s = seq(&[1, 6, 9, 3, 7, 4], 4);
    let tight = Batch::from_sequences([&s], None).unwrap();
    let padded = Batch::from_sequences([&s], Some(12)).unwrap();
    let (la, ga) = loss_and_grad(&p, &tight).unwrap();
    let (lb, gb) = loss_and_grad(&p, &padded).unwrap();
    assert!((la - lb).abs() < 1e-14);
    for ((name, a), (_, b)) in ga.named().iter().zip(gb.named().iter()) {
        if name == "pos_emb" {
            continue;
        }
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-13, "{name}");
        }
    }
}

#[test]
fn fifty_steps_reduce_smoothed_loss_on_a_fixed_batch() {
    let cfg = ModelConfig { vocab_size: 135, ..ModelConfig::default() };
    let tc = TrainConfig::default();
    let mut p = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let seqs: Vec<TokenSeq> = (0..4)
        .map(|r| {
            let mut ids: Vec<u32> = (0..352).map(|_| rng.gen_range(1..134)).collect();
            ids[0] = 1;
            ids[351] = 3;
            ids.extend([130 + r as u32 % 4, 4]);
            seq(&ids, 352)
        })
        .collect();
    let batch = Batch::from_sequences(&seqs, None).unwrap();
    let mut state = OptState::new(&p);
    let mut losses = Vec::new();
    for step in 1..=50 {
        let (l, mut g) = loss_and_grad(&p, &batch).unwrap();
        clip_gradients(&mut g, tc.clip_norm).unwrap();
        adamw_step(&mut p, &g, &mut state, lr_at(step, &tc), &tc).unwrap();
        losses.push(l as f64);
    }
    let windows: Vec<f64> = losses.chunks(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "smoothed losses {windows:?}");
    }
}
