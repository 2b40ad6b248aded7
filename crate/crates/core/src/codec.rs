//! Keypoint tokenization.
//!
//! A sequence is serialized as
//!
//! ```text
//! [BOS] ([F] x0 y0 x1 y1 ... x16 y16) * 10 [GEN] <label words> [SEP]
//! ```
//!
//! where each coordinate is a bin token from a dedicated X or Y range, and a
//! missing joint is the pair `[MISS] [MISS]`. The target mask covers
//! everything after `[GEN]` through `[SEP]`.
//!
//! Token id layout for `B` bins:
//!
//! | ids                 | tokens                                   |
//! |---------------------|------------------------------------------|
//! | 0..6                | `[PAD] [BOS] [F] [GEN] [SEP] [MISS]`     |
//! | 6..6+B              | `X_0 .. X_{B-1}`                         |
//! | 6+B..6+2B           | `Y_0 .. Y_{B-1}`                         |
//! | 6+2B..              | label words, sorted                      |

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{NormalizedSequence, NUM_FRAMES, NUM_JOINTS};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const FRAME: TokenId = 2;
pub const GEN: TokenId = 3;
pub const SEP: TokenId = 4;
pub const MISS: TokenId = 5;
pub const NUM_SPECIALS: usize = 6;

pub const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["[PAD]", "[BOS]", "[F]", "[GEN]", "[SEP]", "[MISS]"];

pub const DEFAULT_BINS: usize = 64;

/// `[BOS]`, ten frames of `[F]` plus 34 coordinate tokens, `[GEN]`.
pub const PREFIX_LEN: usize = 1 + NUM_FRAMES * (1 + 2 * NUM_JOINTS) + 1;

const SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("value {value} outside the quantizer domain")]
    DomainError { value: f64 },
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("label {0:?} is not canonical (lowercase words of [a-z0-9] separated by single spaces)")]
    InvalidLabel(String),
    #[error("label word {0:?} is not in the vocabulary")]
    UnknownLabelWord(String),
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("vocabulary file: {0}")]
    VocabFormat(String),
}

/// Bin index of a unit-interval coordinate.
pub fn quantize(c: f64, bins: usize) -> Result<usize, CodecError> {
    if !(c >= -SLACK && c <= 1.0 + SLACK) || bins == 0 {
        return Err(CodecError::DomainError { value: c });
    }
    let c = c.clamp(0.0, 1.0);
    Ok(((c * bins as f64).floor() as usize).min(bins - 1))
}

/// Center of a bin.
pub fn dequantize(bin: usize, bins: usize) -> Result<f64, CodecError> {
    if bin >= bins {
        return Err(CodecError::DomainError { value: bin as f64 });
    }
    Ok((bin as f64 + 0.5) / bins as f64)
}

fn is_canonical(label: &str) -> bool {
    !label.is_empty()
        && label
            .split(' ')
            .all(|w| !w.is_empty() && w.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    bins: usize,
    words: Vec<String>,
    labels: Vec<String>,
    word_ids: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    bins: usize,
    labels: Vec<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = CodecError;

    fn try_from(r: VocabRepr) -> Result<Self, Self::Error> {
        Vocabulary::new(&r.labels, r.bins)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr { bins: v.bins, labels: v.labels }
    }
}

impl Vocabulary {
    /// Build the vocabulary for a set of canonical labels. Duplicates are
    /// merged; the label set is kept sorted.
    pub fn new<S: AsRef<str>>(labels: &[S], bins: usize) -> Result<Self, CodecError> {
        if bins == 0 {
            return Err(CodecError::DomainError { value: 0.0 });
        }
        let label_set: BTreeSet<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        if label_set.is_empty() {
            return Err(CodecError::EmptyLabelSet);
        }
        if let Some(bad) = label_set.iter().find(|l| !is_canonical(l)) {
            return Err(CodecError::InvalidLabel(bad.clone()));
        }
        let words: BTreeSet<String> =
            label_set.iter().flat_map(|l| l.split(' ').map(str::to_string)).collect();
        let words: Vec<String> = words.into_iter().collect();
        let base = (NUM_SPECIALS + 2 * bins) as TokenId;
        let word_ids = words.iter().enumerate().map(|(i, w)| (w.clone(), base + i as TokenId)).collect();
        Ok(Self { bins, words, labels: label_set.into_iter().collect(), word_ids })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        NUM_SPECIALS + 2 * self.bins + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Canonical labels in sorted order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_words(&self) -> &[String] {
        &self.words
    }

    pub fn x_token(&self, bin: usize) -> TokenId {
        debug_assert!(bin < self.bins);
        (NUM_SPECIALS + bin) as TokenId
    }

    pub fn y_token(&self, bin: usize) -> TokenId {
        debug_assert!(bin < self.bins);
        (NUM_SPECIALS + self.bins + bin) as TokenId
    }

    pub fn x_bin(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        (NUM_SPECIALS..NUM_SPECIALS + self.bins).contains(&id).then(|| id - NUM_SPECIALS)
    }

    pub fn y_bin(&self, id: TokenId) -> Option<usize> {
        let id = id as usize;
        let lo = NUM_SPECIALS + self.bins;
        (lo..lo + self.bins).contains(&id).then(|| id - lo)
    }

    pub fn first_word_id(&self) -> TokenId {
        (NUM_SPECIALS + 2 * self.bins) as TokenId
    }

    pub fn word_id(&self, word: &str) -> Option<TokenId> {
        self.word_ids.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        let first = self.first_word_id();
        (id >= first).then(|| self.words.get((id - first) as usize).map(String::as_str)).flatten()
    }

    pub fn is_word(&self, id: TokenId) -> bool {
        self.word(id).is_some()
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).is_ok()
    }

    /// Word tokens of a label.
    pub fn tokenize_label(&self, label: &str) -> Result<Vec<TokenId>, CodecError> {
        if label.is_empty() {
            return Err(CodecError::InvalidLabel(String::new()));
        }
        label
            .split(' ')
            .map(|w| self.word_id(w).ok_or_else(|| CodecError::UnknownLabelWord(w.to_string())))
            .collect()
    }

    pub fn token_name(&self, id: TokenId) -> String {
        if (id as usize) < NUM_SPECIALS {
            SPECIAL_NAMES[id as usize].to_string()
        } else if let Some(b) = self.x_bin(id) {
            format!("X_{b}")
        } else if let Some(b) = self.y_bin(id) {
            format!("Y_{b}")
        } else if let Some(w) = self.word(id) {
            w.to_string()
        } else {
            format!("<unk:{id}>")
        }
    }

    /// Text form: `#bins=B`, one `#label=<label>` line per label, then one
    /// token per line where the n-th token line holds id n.
    pub fn to_text(&self) -> String {
        let mut s = format!("#bins={}\n", self.bins);
        for l in &self.labels {
            let _ = writeln!(s, "#label={l}");
        }
        for id in 0..self.len() as TokenId {
            s.push_str(&self.token_name(id));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CodecError> {
        let err = |m: String| CodecError::VocabFormat(m);
        let mut lines = text.lines();
        let bins: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("#bins="))
            .ok_or_else(|| err("missing #bins= header".into()))?
            .trim()
            .parse()
            .map_err(|e| err(format!("bad bin count: {e}")))?;
        let mut labels = Vec::new();
        let mut tokens = Vec::new();
        for line in lines {
            if let Some(l) = line.strip_prefix("#label=") {
                labels.push(l.to_string());
            } else if !line.is_empty() {
                tokens.push(line);
            }
        }
        let vocab = Vocabulary::new(&labels, bins)?;
        if tokens.len() != vocab.len() {
            return Err(err(format!("{} token lines, expected {}", tokens.len(), vocab.len())));
        }
        for (id, name) in tokens.iter().enumerate() {
            if vocab.token_name(id as TokenId) != *name {
                return Err(err(format!("line for id {id} is {name:?}, expected {:?}", vocab.token_name(id as TokenId))));
            }
        }
        Ok(vocab)
    }
}

/// Token ids with a parallel loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub target_mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Serialize a normalized sequence, optionally followed by its label.
pub fn encode_example(
    seq: &NormalizedSequence,
    label: Option<&str>,
    vocab: &Vocabulary,
) -> Result<TokenSeq, CodecError> {
    let label_ids = label.map(|l| vocab.tokenize_label(l)).transpose()?;
    let extra = label_ids.as_ref().map_or(0, |l| l.len() + 1);
    let mut ids = Vec::with_capacity(PREFIX_LEN + extra);
    ids.push(BOS);
    for f in 0..NUM_FRAMES {
        ids.push(FRAME);
        for j in 0..NUM_JOINTS {
            if seq.missing[f][j] {
                ids.extend([MISS, MISS]);
            } else {
                let [x, y] = seq.coords[f][j];
                ids.push(vocab.x_token(quantize(x, vocab.bins)?));
                ids.push(vocab.y_token(quantize(y, vocab.bins)?));
            }
        }
    }
    ids.push(GEN);
    let mut target_mask = vec![false; ids.len()];
    if let Some(l) = label_ids {
        ids.extend(l);
        ids.push(SEP);
        target_mask.resize(ids.len(), true);
    }
    Ok(TokenSeq { ids, target_mask })
}

/// Label text between the single `[GEN]` and the first following `[SEP]`.
pub fn decode_label(seq: &TokenSeq, vocab: &Vocabulary) -> Result<String, CodecError> {
    decode_label_ids(&seq.ids, vocab)
}

pub fn decode_label_ids(ids: &[TokenId], vocab: &Vocabulary) -> Result<String, CodecError> {
    let malformed = |m: &str| CodecError::MalformedSequence(m.to_string());
    let mut gens = ids.iter().enumerate().filter(|(_, &t)| t == GEN);
    let (g, _) = gens.next().ok_or_else(|| malformed("no [GEN] token"))?;
    if gens.next().is_some() {
        return Err(malformed("more than one [GEN] token"));
    }
    let words = ids[g + 1..]
        .iter()
        .take_while(|&&t| t != SEP)
        .map(|&t| vocab.word(t).ok_or_else(|| malformed(&format!("token {} in label region", vocab.token_name(t)))))
        .collect::<Result<Vec<_>, _>>()?;
    if words.is_empty() {
        return Err(malformed("empty label"));
    }
    Ok(words.join(" "))
}

/// Recover coordinates (bin centers) and missing flags from an encoded prefix.
pub fn decode_pose(seq: &TokenSeq, vocab: &Vocabulary) -> Result<NormalizedSequence, CodecError> {
    let ids = &seq.ids;
    let malformed = |m: String| CodecError::MalformedSequence(m);
    if ids.len() < PREFIX_LEN {
        return Err(malformed(format!("{} tokens, prefix needs {PREFIX_LEN}", ids.len())));
    }
    if ids[0] != BOS {
        return Err(malformed("sequence does not start with [BOS]".into()));
    }
    if ids[PREFIX_LEN - 1] != GEN {
        return Err(malformed(format!("expected [GEN] at position {}", PREFIX_LEN - 1)));
    }
    let mut out = NormalizedSequence::all_missing("");
    let mut pos = 1;
    for f in 0..NUM_FRAMES {
        if ids[pos] != FRAME {
            return Err(malformed(format!("expected [F] at position {pos}")));
        }
        pos += 1;
        for j in 0..NUM_JOINTS {
            let (a, b) = (ids[pos], ids[pos + 1]);
            match (a, b) {
                (MISS, MISS) => {}
                _ => match (vocab.x_bin(a), vocab.y_bin(b)) {
                    (Some(xb), Some(yb)) => {
                        out.coords[f][j] = [dequantize(xb, vocab.bins)?, dequantize(yb, vocab.bins)?];
                        out.missing[f][j] = false;
                    }
                    _ => {
                        return Err(malformed(format!(
                            "frame {f} joint {j}: ({}, {}) is not a coordinate pair",
                            vocab.token_name(a),
                            vocab.token_name(b)
                        )))
                    }
                },
            }
            pos += 2;
        }
    }
    Ok(out)
}
