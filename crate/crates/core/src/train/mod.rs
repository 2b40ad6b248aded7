//! AdamW training with a warmup-cosine schedule and best-checkpoint selection.

mod checkpoint;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_example, CodecError, TokenSeq, Vocabulary};
use crate::eval::{encode_prefixes, evaluate_prefixes, DecodeMode, EvalError};
use crate::ingest::LabeledSequence;
use crate::model::{forward, loss, loss_and_grad, loss_and_grad_with_dropout, Batch, ModelConfig, ModelError, ModelParams};
use crate::skeleton::{normalize_sequence, DEFAULT_MARGIN_FRAC, DEFAULT_TAU};
use crate::synth::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, clip_gradients, global_norm, lr_at, OptState};

/// Number of trailing log rows embedded in a checkpoint.
pub const LOG_TAIL: usize = 20;

const INIT_TAG: u64 = 0x696e_6974;
const SHUFFLE_TAG: u64 = 0x7368_7566;
const DROPOUT_TAG: u64 = 0x6472_6f70;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("label {0:?} is not covered by the vocabulary")]
    UnknownLabel(String),
    #[error("example {id} encodes to {len} tokens, more than the context length {context}")]
    SequenceTooLong { id: String, len: usize, context: usize },
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("update of {tensor} produced non-finite values")]
    NonFiniteUpdate { tensor: String },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 5000,
            peak_lr: 3e-4,
            warmup_steps: 100,
            min_lr: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 42,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    /// `warmup_steps < max_steps` is only enforced when training runs at all,
    /// so `max_steps = 0` works with the default warmup.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if self.max_steps > 0 && self.warmup_steps >= self.max_steps {
            return bad("warmup_steps must be less than max_steps");
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return bad("need 0 < min_lr <= peak_lr");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return bad("eps and clip_norm must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// One line of the training log. Validation fields are filled on
/// evaluation steps only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub val_loss: f64,
    pub val_top1: f64,
}

pub const LOG_HEADER: &str = "step,lr,train_loss,val_loss,val_top1";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn log_row_csv(r: &LogRow) -> String {
    format!("{},{},{},{},{}", r.step, r.lr, opt(r.train_loss), opt(r.val_loss), opt(r.val_top1))
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", log_row_csv(r));
    }
    s
}

/// Vocabulary over the distinct labels of `data`.
pub fn build_vocab(data: &[LabeledSequence], bins: usize) -> Result<Vocabulary, CodecError> {
    let labels: Vec<&str> = data.iter().map(|e| e.label.as_str()).collect();
    Vocabulary::new(&labels, bins)
}

pub fn encode_training_set(data: &[LabeledSequence], vocab: &Vocabulary, context: usize) -> Result<Vec<TokenSeq>, TrainError> {
    data.iter()
        .map(|ex| {
            if !vocab.contains_label(&ex.label) {
                return Err(TrainError::UnknownLabel(ex.label.clone()));
            }
            let norm = normalize_sequence(&ex.seq, DEFAULT_TAU, DEFAULT_MARGIN_FRAC).map_err(|source| {
                EvalError::Skeleton { id: ex.seq.source_id.clone(), source }
            })?;
            let seq = encode_example(&norm, Some(&ex.label), vocab)?;
            if seq.len() > context {
                return Err(TrainError::SequenceTooLong { id: ex.seq.source_id.clone(), len: seq.len(), context });
            }
            Ok(seq)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Evaluate validation examples on the rayon pool.
    pub parallel: bool,
    /// Stop after the first evaluation whose Top-1 reaches this value.
    pub stop_at_top1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Endless stream of example indices, reshuffled each epoch by a
/// permutation that depends only on `(seed, epoch)`.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { n, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, SHUFFLE_TAG, self.epoch]));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.n {
                    self.epoch += 1;
                    self.shuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Token-weighted mean loss over `seqs`.
pub fn dataset_loss(params: &ModelParams<f32>, seqs: &[TokenSeq], batch_size: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = Batch::from_sequences(chunk, None)?;
        let n = batch.target_mask.iter().filter(|&&t| t).count();
        total += loss(&forward(params, &batch)?, &batch)? as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(ModelError::NoTargets.into());
    }
    Ok(total / count as f64)
}

/// Train from scratch and return the parameters with the best validation
/// Top-1 (greedy decoding), along with the full log.
pub fn train(
    train_set: &[LabeledSequence],
    val_set: &[LabeledSequence],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    if model_cfg.vocab_size != vocab.len() {
        return Err(TrainError::InvalidConfig(format!(
            "vocab_size {} does not match the vocabulary of {} tokens",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let train_seqs = encode_training_set(train_set, vocab, model_cfg.context_len)?;
    let val_seqs = encode_training_set(val_set, vocab, model_cfg.context_len)?;
    let val_prefixes = encode_prefixes(val_set, vocab, DEFAULT_TAU, DEFAULT_MARGIN_FRAC)?;
    let val_golds: Vec<String> = val_set.iter().map(|e| e.label.clone()).collect();

    let mut params = ModelParams::<f32>::init(model_cfg, derive_seed(&[cfg.seed, INIT_TAG]))?;
    let mut state = OptState::new(&params);
    let mut sampler = Sampler::new(train_seqs.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.max_steps as usize + 1);
    let mut best: Option<(EvalRecord, ModelParams<f32>, OptState<f32>)> = None;

    let mut step = 0u64;
    loop {
        let mut row = LogRow { step, lr: lr_at(step, cfg), train_loss: None, val_loss: None, val_top1: None };
        if step > 0 {
            let idx = sampler.next_batch(cfg.batch_size);
            let batch = Batch::from_sequences(idx.iter().map(|&i| &train_seqs[i]), None)?;
            let (l, mut grads) = if model_cfg.dropout_rate > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, DROPOUT_TAG, step]));
                loss_and_grad_with_dropout(&params, &batch, &mut rng)?
            } else {
                loss_and_grad(&params, &batch)?
            };
            clip_gradients(&mut grads, cfg.clip_norm)?;
            adamw_step(&mut params, &grads, &mut state, row.lr, cfg)?;
            row.train_loss = Some(l as f64);
        }
        let mut reached = false;
        if (step > 0 && step % cfg.eval_every == 0) || step == cfg.max_steps {
            let val_loss = dataset_loss(&params, &val_seqs, cfg.batch_size)?;
            let m = evaluate_prefixes(&params, vocab, &val_prefixes, &val_golds, DecodeMode::Greedy, opts.parallel)?;
            row.val_loss = Some(val_loss);
            row.val_top1 = Some(m.top1);
            if best.as_ref().map_or(true, |(b, _, _)| m.top1 > b.val_top1) {
                best = Some((EvalRecord { step, val_loss, val_top1: m.top1 }, params.clone(), state.clone()));
            }
            reached = opts.stop_at_top1.is_some_and(|t| m.top1 >= t);
        }
        on_row(&row);
        log.push(row);
        if step == cfg.max_steps || reached {
            break;
        }
        step += 1;
    }

    let (record, best_params, best_state) = best.expect("the last logged step is always evaluated");
    let tail = log[log.len().saturating_sub(LOG_TAIL)..].to_vec();
    let checkpoint = Checkpoint {
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        vocab: vocab.clone(),
        params: best_params,
        opt_state: Some(best_state),
        log_tail: tail,
        best: Some(record),
    };
    Ok(TrainOutcome { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, ActivityClass, SynthSpec};

    fn tiny_model(vocab: &Vocabulary) -> ModelConfig {
        ModelConfig { vocab_size: vocab.len(), context_len: 360, d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, dropout_rate: 0.0 }
    }

    fn data() -> (Vec<LabeledSequence>, Vec<LabeledSequence>) {
        let spec = SynthSpec { classes: vec![ActivityClass::Wave, ActivityClass::Jump], count: 4, ..SynthSpec::default() };
        generate_dataset(&spec).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { max_steps: 0, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { max_steps: 50, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { min_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { min_lr: 1e-3, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(7, 1);
        let mut first: Vec<usize> = s.next_batch(7);
        let second = s.next_batch(7);
        assert_ne!(first, second);
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut again = Sampler::new(7, 1);
        again.next_batch(3);
        assert_eq!(again.next_batch(11)[4..], second[..]);
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (tr, va) = data();
        let vocab = build_vocab(&tr, 16).unwrap();
        let mc = tiny_model(&vocab);
        let tc = TrainConfig { max_steps: 0, seed: 3, ..TrainConfig::default() };
        let out = train(&tr, &va, &vocab, &mc, &tc, &TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(out.checkpoint.params, ModelParams::init(&mc, derive_seed(&[3, INIT_TAG])).unwrap());
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].val_top1.is_some());
        assert_eq!(out.checkpoint.best.as_ref().unwrap().step, 0);
    }

    #[test]
    fn log_layout_and_determinism() {
        let (tr, va) = data();
        let vocab = build_vocab(&tr, 16).unwrap();
        let mc = tiny_model(&vocab);
        let tc = TrainConfig { max_steps: 6, warmup_steps: 2, eval_every: 4, batch_size: 3, ..TrainConfig::default() };
        let run = || train(&tr, &va, &vocab, &mc, &tc, &TrainOptions::default(), |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let stopped = train(&tr, &va, &vocab, &mc, &tc, &TrainOptions { stop_at_top1: Some(0.0), ..TrainOptions::default() }, |_| {}).unwrap();
        assert_eq!(stopped.log.len(), 5);
        assert_eq!(log_to_csv(&stopped.log), log_to_csv(&a.log[..5]));
        let evals: Vec<u64> = a.log.iter().filter(|r| r.val_top1.is_some()).map(|r| r.step).collect();
        assert_eq!(evals, vec![4, 6]);
        let csv = log_to_csv(&a.log);
        assert!(csv.starts_with("step,lr,train_loss,val_loss,val_top1\n0,0,,,\n1,"));
    }

    #[test]
    fn rejects_uncovered_labels_and_long_sequences() {
        let (tr, va) = data();
        let vocab = Vocabulary::new(&["wave"], 16).unwrap();
        let mc = tiny_model(&vocab);
        let r = train(&tr, &va, &vocab, &mc, &TrainConfig::default(), &TrainOptions::default(), |_| {});
        assert!(matches!(r, Err(TrainError::UnknownLabel(_))));
        let vocab = build_vocab(&tr, 16).unwrap();
        let mc = ModelConfig { context_len: 100, ..tiny_model(&vocab) };
        let r = train(&tr, &va, &vocab, &mc, &TrainConfig::default(), &TrainOptions::default(), |_| {});
        assert!(matches!(r, Err(TrainError::SequenceTooLong { .. })));
    }
}
