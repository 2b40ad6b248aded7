//! Label generation after `[GEN]` and Top-1 reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_label_ids, encode_example, CodecError, TokenId, TokenSeq, Vocabulary, GEN, SEP};
use crate::ingest::LabeledSequence;
use crate::model::{DecodeState, ModelError, ModelParams, Scalar};
use crate::skeleton::{normalize_sequence, SkeletonError};

pub const DEFAULT_MAX_LABEL_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions but {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("gold label {0:?} is not in the vocabulary label set")]
    UnknownLabel(String),
    #[error("prefix must end with [GEN]")]
    BadPrefix,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("sequence {id}: {source}")]
    Skeleton { id: String, source: SkeletonError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Constrained,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Constrained => "constrained",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "constrained" => Ok(DecodeMode::Constrained),
            other => Err(format!("unknown decode mode {other:?} (expected greedy or constrained)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

/// Prefix tree over the word-token spelling of every label.
#[derive(Debug, Clone)]
pub struct LabelTrie {
    nodes: Vec<TrieNode>,
}

impl LabelTrie {
    pub const ROOT: usize = 0;

    pub fn children(&self, node: usize) -> impl Iterator<Item = (TokenId, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &n)| (t, n))
    }

    pub fn child(&self, node: usize, token: TokenId) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Tokens allowed after reaching `node`, in ascending id order.
    pub fn allowed(&self, node: usize) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = self.nodes[node].children.keys().copied().collect();
        if self.nodes[node].terminal {
            out.push(SEP);
        }
        out.sort_unstable();
        out
    }

    /// Node reached by following `path` from the root.
    pub fn walk(&self, path: &[TokenId]) -> Option<usize> {
        path.iter().try_fold(Self::ROOT, |n, &t| self.child(n, t))
    }
}

pub fn build_label_trie(vocab: &Vocabulary) -> LabelTrie {
    let mut nodes = vec![TrieNode::default()];
    for label in vocab.labels() {
        let ids = vocab.tokenize_label(label).expect("vocabulary labels tokenize");
        let mut cur = LabelTrie::ROOT;
        for id in ids {
            cur = match nodes[cur].children.get(&id) {
                Some(&n) => n,
                None => {
                    nodes.push(TrieNode::default());
                    let n = nodes.len() - 1;
                    nodes[cur].children.insert(id, n);
                    n
                }
            };
        }
        nodes[cur].terminal = true;
    }
    LabelTrie { nodes }
}

fn logit<F: Scalar>(v: F) -> F {
    if v.is_nan() {
        F::neg_infinity()
    } else {
        v
    }
}

/// Index of the largest logit; ties resolve to the lowest id and NaN never wins.
pub fn argmax<F: Scalar>(logits: &[F]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if logit(v) > logit(logits[best]) {
            best = i;
        }
    }
    best as TokenId
}

fn argmax_among<F: Scalar>(logits: &[F], allowed: &[TokenId]) -> TokenId {
    let mut best = allowed[0];
    for &t in &allowed[1..] {
        if logit(logits[t as usize]) > logit(logits[best as usize]) {
            best = t;
        }
    }
    best
}

fn check_prefix(prefix: &TokenSeq) -> Result<(), EvalError> {
    if prefix.ids.last() != Some(&GEN) {
        return Err(EvalError::BadPrefix);
    }
    Ok(())
}

/// Append argmax tokens until `[SEP]`, `max_label_len` tokens, or the end of
/// the context window. The returned ids exclude `[SEP]`.
pub fn greedy_decode<F: Scalar>(
    params: &ModelParams<F>,
    prefix: &TokenSeq,
    max_label_len: usize,
) -> Result<Vec<TokenId>, EvalError> {
    check_prefix(prefix)?;
    let (mut state, mut logits) = DecodeState::prefill(params, &prefix.ids)?;
    let mut out = Vec::new();
    while out.len() < max_label_len {
        let tok = argmax(&logits);
        if tok == SEP {
            break;
        }
        out.push(tok);
        if out.len() == max_label_len || state.len() >= params.config.context_len {
            break;
        }
        logits = state.step(params, tok)?;
    }
    Ok(out)
}

/// Argmax restricted to trie continuations. Always yields a label from the
/// vocabulary label set. If the context window runs out mid-label, the
/// remaining path takes `[SEP]` when legal and otherwise the lowest child.
pub fn constrained_decode<F: Scalar>(
    params: &ModelParams<F>,
    prefix: &TokenSeq,
    trie: &LabelTrie,
    vocab: &Vocabulary,
) -> Result<String, EvalError> {
    check_prefix(prefix)?;
    let (mut state, first) = DecodeState::prefill(params, &prefix.ids)?;
    let mut logits = Some(first);
    let mut node = LabelTrie::ROOT;
    let mut path = Vec::new();
    loop {
        let allowed = trie.allowed(node);
        let tok = match &logits {
            Some(l) => argmax_among(l, &allowed),
            None if trie.is_terminal(node) => SEP,
            None => allowed[0],
        };
        if tok == SEP {
            break;
        }
        path.push(tok);
        node = trie.child(node, tok).expect("allowed token is a child");
        if trie.children(node).next().is_none() {
            break;
        }
        logits = if state.len() < params.config.context_len { Some(state.step(params, tok)?) } else { None };
    }
    Ok(decode_label_ids(&label_with_markers(&path), vocab)?)
}

fn label_with_markers(path: &[TokenId]) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(path.len() + 2);
    ids.push(GEN);
    ids.extend_from_slice(path);
    ids.push(SEP);
    ids
}

/// Text of generated ids, or `None` when they do not spell a label in the
/// vocabulary label set.
pub fn label_text(ids: &[TokenId], vocab: &Vocabulary) -> Option<String> {
    let text = decode_label_ids(&label_with_markers(ids), vocab).ok()?;
    vocab.contains_label(&text).then_some(text)
}

pub fn top1_accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], golds: &[T]) -> Result<f64, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mode: DecodeMode,
    pub top1: f64,
    pub labels: Vec<String>,
    pub per_class: BTreeMap<String, ClassCount>,
    /// Rows are gold labels, columns predicted labels in `labels` order; in
    /// greedy mode a final column counts outputs outside the label set.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// Tally predictions; `None` marks an invalid (out-of-set) prediction.
    pub fn from_predictions(
        vocab: &Vocabulary,
        mode: DecodeMode,
        preds: &[Option<String>],
        golds: &[String],
    ) -> Result<Self, EvalError> {
        if preds.len() != golds.len() {
            return Err(EvalError::LengthMismatch { preds: preds.len(), golds: golds.len() });
        }
        if preds.is_empty() {
            return Err(EvalError::EmptyEvaluation);
        }
        let labels = vocab.labels().to_vec();
        let index = |l: &str| labels.iter().position(|x| x == l);
        let cols = labels.len() + usize::from(mode == DecodeMode::Greedy);
        let mut confusion = vec![vec![0usize; cols]; labels.len()];
        let mut per_class: BTreeMap<String, ClassCount> =
            labels.iter().map(|l| (l.clone(), ClassCount { correct: 0, total: 0 })).collect();
        let mut hits = 0;
        for (p, g) in preds.iter().zip(golds) {
            let gi = index(g).ok_or_else(|| EvalError::UnknownLabel(g.clone()))?;
            let pi = match p.as_deref().and_then(index) {
                Some(i) => i,
                None if mode == DecodeMode::Greedy => labels.len(),
                None => unreachable!("constrained decoding returned a label outside the set"),
            };
            confusion[gi][pi] += 1;
            let c = per_class.get_mut(g).expect("label present");
            c.total += 1;
            if pi == gi {
                c.correct += 1;
                hits += 1;
            }
        }
        Ok(Metrics { mode, top1: hits as f64 / preds.len() as f64, labels, per_class, confusion })
    }

    pub fn invalid_count(&self) -> usize {
        match self.mode {
            DecodeMode::Greedy => self.confusion.iter().map(|r| r[self.labels.len()]).sum(),
            DecodeMode::Constrained => 0,
        }
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("gold\\pred");
        for l in &self.labels {
            let _ = write!(s, ",{l}");
        }
        if self.mode == DecodeMode::Greedy {
            s.push_str(",<invalid>");
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.confusion) {
            s.push_str(l);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self, confusion_csv: &str) -> serde_json::Value {
        serde_json::json!({
            "top1": self.top1,
            "mode": self.mode.name(),
            "per_class": self.per_class,
            "confusion_csv": confusion_csv,
        })
    }

    /// Write the JSON report to `json_path` and the confusion matrix next to
    /// it as `<stem>_confusion.csv`.
    pub fn write_report(&self, json_path: &Path) -> Result<(), EvalError> {
        let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        let csv_name = format!("{stem}_confusion.csv");
        let csv_path = json_path.with_file_name(&csv_name);
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        std::fs::write(&csv_path, self.confusion_csv()).map_err(io(&csv_path))?;
        let json = serde_json::to_string_pretty(&self.to_json(&csv_name)).expect("json");
        std::fs::write(json_path, json + "\n").map_err(io(json_path))?;
        Ok(())
    }
}

/// Decode one prefix; `None` for greedy output outside the label set.
pub fn predict<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    trie: &LabelTrie,
    prefix: &TokenSeq,
    mode: DecodeMode,
) -> Result<Option<String>, EvalError> {
    match mode {
        DecodeMode::Greedy => Ok(label_text(&greedy_decode(params, prefix, DEFAULT_MAX_LABEL_LEN)?, vocab)),
        DecodeMode::Constrained => constrained_decode(params, prefix, trie, vocab).map(Some),
    }
}

/// Evaluate already-encoded prefixes against gold labels.
pub fn evaluate_prefixes<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    prefixes: &[TokenSeq],
    golds: &[String],
    mode: DecodeMode,
    parallel: bool,
) -> Result<Metrics, EvalError> {
    if prefixes.len() != golds.len() {
        return Err(EvalError::LengthMismatch { preds: prefixes.len(), golds: golds.len() });
    }
    if prefixes.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    if let Some(g) = golds.iter().find(|g| !vocab.contains_label(g)) {
        return Err(EvalError::UnknownLabel(g.clone()));
    }
    let trie = build_label_trie(vocab);
    let run = |p: &TokenSeq| predict(params, vocab, &trie, p, mode);
    let preds: Vec<Option<String>> = if parallel {
        prefixes.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        prefixes.iter().map(run).collect::<Result<_, _>>()?
    };
    Metrics::from_predictions(vocab, mode, &preds, golds)
}

/// Normalize and encode raw sequences into decoding prefixes.
pub fn encode_prefixes(
    data: &[LabeledSequence],
    vocab: &Vocabulary,
    tau: f64,
    margin_frac: f64,
) -> Result<Vec<TokenSeq>, EvalError> {
    data.iter()
        .map(|ex| {
            let norm = normalize_sequence(&ex.seq, tau, margin_frac)
                .map_err(|source| EvalError::Skeleton { id: ex.seq.source_id.clone(), source })?;
            Ok(encode_example(&norm, None, vocab)?)
        })
        .collect()
}

pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    data: &[LabeledSequence],
    mode: DecodeMode,
    parallel: bool,
) -> Result<Metrics, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    if let Some(ex) = data.iter().find(|ex| !vocab.contains_label(&ex.label)) {
        return Err(EvalError::UnknownLabel(ex.label.clone()));
    }
    let prefixes = encode_prefixes(data, vocab, crate::skeleton::DEFAULT_TAU, crate::skeleton::DEFAULT_MARGIN_FRAC)?;
    let golds: Vec<String> = data.iter().map(|ex| ex.label.clone()).collect();
    evaluate_prefixes(params, vocab, &prefixes, &golds, mode, parallel)
}
