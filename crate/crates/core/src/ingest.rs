//! AlphaPose result ingestion.
//!
//! An AlphaPose results file is a JSON array of detections:
//!
//! ```json
//! [{"image_id": "12.jpg", "keypoints": [x1, y1, c1, ..., x17, y17, c17], "score": 2.71}]
//! ```
//!
//! Detections are grouped into frames by `image_id`, frames are ordered by the
//! natural order of their ids, one person is kept per frame, and ten frames are
//! sampled uniformly by index.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{
    normalize_sequence, FramePose, Keypoint, PoseSequence, SkeletonError, DEFAULT_MARGIN_FRAC,
    DEFAULT_TAU, NUM_FRAMES, NUM_JOINTS,
};

pub const KEYPOINT_ARITY: usize = NUM_JOINTS * 3;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("results file must be a JSON array of detections")]
    NotAnArray,
    #[error("entry {index}: {message}")]
    Entry { index: usize, message: String },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("frame has no detections")]
    EmptyFrame,
    #[error("video has no frames")]
    EmptyVideo,
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest row {row} ({video_id}): pose file {path} does not exist")]
    MissingFile { row: usize, video_id: String, path: PathBuf },
    #[error("manifest row {row}: duplicate video_id {video_id}")]
    DuplicateVideo { row: usize, video_id: String },
    #[error("manifest row {row} ({video_id}): empty label")]
    EmptyLabel { row: usize, video_id: String },
    #[error("manifest row {row} ({video_id}): {source}")]
    Parse { row: usize, video_id: String, source: ParseError },
}

/// One person detection from an AlphaPose results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl Detection {
    pub fn to_frame_pose(&self) -> FramePose {
        let mut joints = [Keypoint::default(); NUM_JOINTS];
        for (j, k) in joints.iter_mut().enumerate() {
            let t = &self.keypoints[3 * j..3 * j + 3];
            *k = Keypoint::new(t[0], t[1], t[2].clamp(0.0, 1.0));
        }
        FramePose::new(joints)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoPoses {
    pub video_id: String,
    pub frames: Vec<FramePose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub seq: PoseSequence,
    pub label: String,
}

/// Parse an AlphaPose results document.
pub fn parse_alphapose(document: &[u8]) -> Result<Vec<Detection>, ParseError> {
    let value: serde_json::Value = serde_json::from_slice(document).map_err(|e| ParseError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let serde_json::Value::Array(entries) = value else {
        return Err(ParseError::NotAnArray);
    };
    entries
        .into_iter()
        .enumerate()
        .map(|(index, entry)| {
            let det: Detection = serde_json::from_value(entry)
                .map_err(|e| ParseError::Entry { index, message: e.to_string() })?;
            if det.keypoints.len() != KEYPOINT_ARITY {
                return Err(ParseError::Entry {
                    index,
                    message: format!(
                        "keypoints has {} numbers, expected {KEYPOINT_ARITY}",
                        det.keypoints.len()
                    ),
                });
            }
            if !det.score.is_finite() {
                return Err(ParseError::Entry { index, message: "score is not finite".into() });
            }
            // Confidence may be any finite number here; it is clamped into
            // [0, 1] when the detection becomes a FramePose.
            if let Some(bad) = det.keypoints.iter().position(|v| !v.is_finite()) {
                return Err(ParseError::Entry {
                    index,
                    message: format!("keypoint value {bad} is not finite"),
                });
            }
            Ok(det)
        })
        .collect()
}

/// Serialize detections back into an AlphaPose results document.
pub fn write_alphapose(detections: &[Detection]) -> String {
    serde_json::to_string(detections).expect("detections serialize")
}

/// Keep the highest-scoring detection. Ties go to the earliest one.
pub fn select_person(detections_for_frame: &[Detection]) -> Result<FramePose, IngestError> {
    let mut best: Option<&Detection> = None;
    for d in detections_for_frame {
        if best.map_or(true, |b| d.score > b.score) {
            best = Some(d);
        }
    }
    best.map(Detection::to_frame_pose).ok_or(IngestError::EmptyFrame)
}

/// Compare strings so that embedded digit runs order numerically
/// (`"frame2" < "frame10"`).
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let na = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let nb = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (da, db) = (&a[..na], &b[..nb]);
                let ta = trim_zeros(da);
                let tb = trim_zeros(db);
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb)).then_with(|| na.cmp(&nb));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[na..];
                b = &b[nb..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let n = digits.iter().take_while(|&&c| c == b'0').count();
    &digits[n.min(digits.len().saturating_sub(1))..]
}

/// Group detections by frame, pick one person per frame and order the frames.
pub fn group_video(video_id: &str, detections: &[Detection]) -> Result<VideoPoses, IngestError> {
    let mut by_image: HashMap<&str, Vec<Detection>> = HashMap::new();
    for d in detections {
        by_image.entry(d.image_id.as_str()).or_default().push(d.clone());
    }
    let mut ids: Vec<&str> = by_image.keys().copied().collect();
    ids.sort_by(|a, b| natural_cmp(a, b).then_with(|| a.cmp(b)));
    let frames = ids
        .iter()
        .map(|id| select_person(&by_image[id]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VideoPoses { video_id: video_id.to_string(), frames })
}

/// Source frame indices used by [`sample_frames`] for a video of `n` frames.
pub fn sample_indices(n: usize) -> [usize; NUM_FRAMES] {
    let mut idx = [0; NUM_FRAMES];
    let last = NUM_FRAMES - 1;
    for (i, slot) in idx.iter_mut().enumerate() {
        *slot = if n >= NUM_FRAMES {
            // round(i * (n - 1) / 9), half up, in integer arithmetic
            (2 * i * (n - 1) + last) / (2 * last)
        } else {
            i.min(n.saturating_sub(1))
        };
    }
    idx
}

/// Pick exactly ten frames uniformly by index, padding short videos with
/// their last frame.
pub fn sample_frames(video: &VideoPoses) -> Result<PoseSequence, IngestError> {
    if video.frames.is_empty() {
        return Err(IngestError::EmptyVideo);
    }
    let idx = sample_indices(video.frames.len());
    let frames = idx.map(|i| video.frames[i]);
    Ok(PoseSequence::new(frames, video.video_id.clone()))
}

/// Lowercase, replace anything outside `[a-z0-9]` with a space, collapse
/// whitespace.
pub fn canonicalize_label(raw: &str) -> String {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestRow {
    video_id: String,
    pose_file: String,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedVideo {
    pub row: usize,
    pub video_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipReport {
    pub skipped: Vec<SkippedVideo>,
}

impl SkipReport {
    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }

    /// CSV with header `row,video_id,reason`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(["row", "video_id", "reason"]).expect("in-memory write");
        for s in &self.skipped {
            w.serialize(s).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub tau: f64,
    pub margin_frac: f64,
    pub parallel: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, margin_frac: DEFAULT_MARGIN_FRAC, parallel: false }
    }
}

enum RowOutcome {
    Kept(LabeledSequence),
    Skipped(String),
}

/// Build labeled sequences from a manifest (`video_id,pose_file,label`) whose
/// `pose_file` paths are relative to `pose_dir`.
///
/// Output order follows manifest order regardless of `opts.parallel`.
pub fn build_dataset(
    pose_dir: &Path,
    manifest: &Path,
    opts: &IngestOptions,
) -> Result<(Vec<LabeledSequence>, SkipReport), ManifestError> {
    let file = std::fs::File::open(manifest)
        .map_err(|source| ManifestError::Io { path: manifest.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        // Row numbers are 1-based data rows (the header is row 0).
        let row = i + 1;
        let mut r = rec?;
        r.label = canonicalize_label(&r.label);
        if !seen.insert(r.video_id.clone()) {
            return Err(ManifestError::DuplicateVideo { row, video_id: r.video_id });
        }
        if r.label.is_empty() {
            return Err(ManifestError::EmptyLabel { row, video_id: r.video_id });
        }
        let path = pose_dir.join(&r.pose_file);
        if !path.is_file() {
            return Err(ManifestError::MissingFile { row, video_id: r.video_id, path });
        }
        rows.push((row, r, path));
    }

    let process = |(row, r, path): &(usize, ManifestRow, PathBuf)| -> Result<RowOutcome, ManifestError> {
        let bytes = std::fs::read(path).map_err(|source| ManifestError::Io { path: path.clone(), source })?;
        let dets = parse_alphapose(&bytes).map_err(|source| ManifestError::Parse {
            row: *row,
            video_id: r.video_id.clone(),
            source,
        })?;
        let video = group_video(&r.video_id, &dets).map_err(|e| match e {
            IngestError::Parse(source) => {
                ManifestError::Parse { row: *row, video_id: r.video_id.clone(), source }
            }
            other => unreachable!("grouping non-empty frames cannot fail: {other}"),
        })?;
        let seq = match sample_frames(&video) {
            Ok(s) => s,
            Err(_) => return Ok(RowOutcome::Skipped("no frames".into())),
        };
        match normalize_sequence(&seq, opts.tau, opts.margin_frac) {
            Ok(_) => Ok(RowOutcome::Kept(LabeledSequence { seq, label: r.label.clone() })),
            Err(SkeletonError::NoValidJoints { tau }) => {
                Ok(RowOutcome::Skipped(format!("no joint with confidence >= {tau}")))
            }
            Err(e) => Ok(RowOutcome::Skipped(e.to_string())),
        }
    };

    let outcomes: Vec<Result<RowOutcome, ManifestError>> = if opts.parallel {
        rows.par_iter().map(process).collect()
    } else {
        rows.iter().map(process).collect()
    };

    let mut kept = Vec::new();
    let mut report = SkipReport::default();
    for ((row, r, _), outcome) in rows.iter().zip(outcomes) {
        match outcome? {
            RowOutcome::Kept(s) => kept.push(s),
            RowOutcome::Skipped(reason) => {
                report.skipped.push(SkippedVideo { row: *row, video_id: r.video_id.clone(), reason })
            }
        }
    }
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(image_id: &str, score: f64, x0: f64) -> Detection {
        let mut kp = Vec::with_capacity(51);
        for j in 0..17 {
            kp.extend_from_slice(&[x0 + j as f64, 2.0 * j as f64, 0.9]);
        }
        Detection { image_id: image_id.into(), keypoints: kp, score }
    }

    #[test]
    fn parses_minimal_file() {
        let doc = write_alphapose(&[det("0.jpg", 1.5, 3.25)]);
        let dets = parse_alphapose(doc.as_bytes()).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0], det("0.jpg", 1.5, 3.25));
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let mut v = serde_json::to_value(vec![det("0.jpg", 1.0, 0.0)]).unwrap();
        v[0]["category_id"] = 1.into();
        v[0]["box"] = serde_json::json!([1, 2, 3, 4]);
        let dets = parse_alphapose(v.to_string().as_bytes()).unwrap();
        assert_eq!(dets.len(), 1);
    }

    #[test]
    fn wrong_arity_names_entry() {
        let mut bad = det("1.jpg", 1.0, 0.0);
        bad.keypoints.pop();
        let doc = write_alphapose(&[det("0.jpg", 1.0, 0.0), bad]);
        match parse_alphapose(doc.as_bytes()) {
            Err(ParseError::Entry { index, message }) => {
                assert_eq!(index, 1);
                assert!(message.contains("50"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_syntax_errors() {
        let doc = r#"[{"image_id": "0.jpg", "keypoints": ["a"], "score": 1}]"#;
        assert!(matches!(parse_alphapose(doc.as_bytes()), Err(ParseError::Entry { index: 0, .. })));
        let doc = r#"[{"image_id": "0.jpg", "#;
        assert!(matches!(parse_alphapose(doc.as_bytes()), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse_alphapose(b"{}"), Err(ParseError::NotAnArray)));
    }

    #[test]
    fn select_person_rules() {
        let one = [det("0", 0.5, 1.0)];
        assert_eq!(select_person(&one).unwrap(), one[0].to_frame_pose());
        let three = [det("0", 0.3, 1.0), det("0", 0.9, 2.0), det("0", 0.5, 3.0)];
        // argmax oracle
        let best = three
            .iter()
            .enumerate()
            .fold(0, |b, (i, d)| if d.score > three[b].score { i } else { b });
        assert_eq!(best, 1);
        assert_eq!(select_person(&three).unwrap(), three[best].to_frame_pose());
        let tie = [det("0", 0.7, 1.0), det("0", 0.7, 2.0)];
        assert_eq!(select_person(&tie).unwrap(), tie[0].to_frame_pose());
        assert!(matches!(select_person(&[]), Err(IngestError::EmptyFrame)));
    }

    #[test]
    fn natural_order() {
        let mut ids = vec!["f10.jpg", "f2.jpg", "f1.jpg", "f010.jpg", "f9.jpg"];
        ids.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(ids, vec!["f1.jpg", "f2.jpg", "f9.jpg", "f10.jpg", "f010.jpg"]);
        assert_eq!(natural_cmp("0", "00"), Ordering::Less);
    }

    #[test]
    fn sampling_indices() {
        assert_eq!(sample_indices(10), [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let oracle: Vec<usize> =
            (0..10).map(|i| (i as f64 * 18.0 / 9.0 + 0.5).floor() as usize).collect();
        assert_eq!(sample_indices(19).to_vec(), oracle);
        assert_eq!(sample_indices(19), [0, 2, 4, 6, 8, 10, 12, 14, 16, 18]);
        assert_eq!(sample_indices(3), [0, 1, 2, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(sample_indices(1), [0; 10]);
    }

    #[test]
    fn sampling_is_monotone_and_in_range() {
        for n in 1..500 {
            let idx = sample_indices(n);
            assert!(idx.windows(2).all(|w| w[0] <= w[1]), "n={n}");
            assert!(idx.iter().all(|&i| i < n));
            assert_eq!(idx[0], 0);
            assert_eq!(idx[9], n - 1);
        }
    }

    #[test]
    fn sample_frames_empty_video() {
        let v = VideoPoses { video_id: "v".into(), frames: vec![] };
        assert!(matches!(sample_frames(&v), Err(IngestError::EmptyVideo)));
    }

    #[test]
    fn grouping_orders_frames_and_selects() {
        let dets = vec![det("10.jpg", 1.0, 10.0), det("2.jpg", 0.4, 2.0), det("2.jpg", 0.8, 20.0)];
        let v = group_video("v", &dets).unwrap();
        assert_eq!(v.frames.len(), 2);
        assert_eq!(v.frames[0], dets[2].to_frame_pose());
        assert_eq!(v.frames[1], dets[0].to_frame_pose());
    }

    #[test]
    fn label_canonicalization() {
        assert_eq!(canonicalize_label("  High-Jump!  "), "high jump");
        assert_eq!(canonicalize_label("Playing   guitar"), "playing guitar");
        assert_eq!(canonicalize_label("?!"), "");
    }

    #[test]
    fn skip_report_csv() {
        assert_eq!(SkipReport::default().to_csv(), "row,video_id,reason\n");
        let r = SkipReport {
            skipped: vec![SkippedVideo { row: 3, video_id: "a,b".into(), reason: "no frames".into() }],
        };
        assert_eq!(r.to_csv(), "row,video_id,reason\n3,\"a,b\",no frames\n");
    }
}
