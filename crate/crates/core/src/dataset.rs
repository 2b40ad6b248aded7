//! Line-delimited JSON dataset files.
//!
//! Each line is `{"video_id": str, "label": str, "frames": [[[x, y, c]; 17]; 10]}`.
//! Synthetic and ingested data share this schema.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::LabeledSequence;
use crate::skeleton::{FramePose, Keypoint, PoseSequence, NUM_FRAMES, NUM_JOINTS};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub video_id: String,
    pub label: String,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl From<&LabeledSequence> for DatasetRecord {
    fn from(s: &LabeledSequence) -> Self {
        let frames = s
            .seq
            .frames
            .iter()
            .map(|f| f.joints.iter().map(|k| [k.x, k.y, k.confidence]).collect())
            .collect();
        Self { video_id: s.seq.source_id.clone(), label: s.label.clone(), frames }
    }
}

impl DatasetRecord {
    pub fn into_labeled(self) -> Result<LabeledSequence, String> {
        if self.frames.len() != NUM_FRAMES {
            return Err(format!("expected {NUM_FRAMES} frames, found {}", self.frames.len()));
        }
        let mut frames = [FramePose::default(); NUM_FRAMES];
        for (f, raw) in self.frames.iter().enumerate() {
            if raw.len() != NUM_JOINTS {
                return Err(format!("frame {f}: expected {NUM_JOINTS} joints, found {}", raw.len()));
            }
            for (j, t) in raw.iter().enumerate() {
                frames[f].joints[j] = Keypoint::checked(t[0], t[1], t[2])
                    .map_err(|e| format!("frame {f} joint {j}: {e}"))?;
            }
        }
        if self.label.is_empty() {
            return Err("empty label".into());
        }
        Ok(LabeledSequence { seq: PoseSequence::new(frames, self.video_id), label: self.label })
    }
}

/// Parse one record line.
pub fn parse_record(line: &str) -> Result<LabeledSequence, String> {
    let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.into_labeled()
}

pub fn to_jsonl(seqs: &[LabeledSequence]) -> String {
    let mut out = String::new();
    for s in seqs {
        out.push_str(&serde_json::to_string(&DatasetRecord::from(s)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: &Path, seqs: &[LabeledSequence]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    f.write_all(to_jsonl(seqs).as_bytes()).map_err(io)?;
    f.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledSequence>, DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|message| DatasetError::Record { line: i + 1, message })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip() {
        let mut frames = [FramePose::default(); NUM_FRAMES];
        frames[3].joints[7] = Keypoint::new(12.375, -4.0, 0.5);
        let s = LabeledSequence { seq: PoseSequence::new(frames, "v1"), label: "jump".into() };
        let text = to_jsonl(std::slice::from_ref(&s));
        assert_eq!(parse_record(text.trim()).unwrap(), s);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let rec = DatasetRecord { video_id: "v".into(), label: "x".into(), frames: vec![] };
        assert!(rec.into_labeled().is_err());
        assert!(parse_record("{not json").is_err());
    }
}
