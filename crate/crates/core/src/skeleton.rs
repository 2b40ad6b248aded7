//! Pose domain types and sequence-level normalization.
//!
//! Raw keypoints live in pixel space. Everything downstream of ingestion works
//! on [`NormalizedSequence`], where each joint is mapped into the unit square
//! of a single bounding box shared by all frames of the sequence. Using one box
//! for the whole sequence keeps whole-body translation (jumping, marching in
//! place) visible as coordinate motion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of joints in a COCO skeleton.
pub const NUM_JOINTS: usize = 17;
/// Number of frames in every sequence fed to the model.
pub const NUM_FRAMES: usize = 10;

/// Default confidence below which a joint counts as missing.
pub const DEFAULT_TAU: f64 = 0.05;
/// Default bounding-box margin, as a fraction of the larger box side.
pub const DEFAULT_MARGIN_FRAC: f64 = 0.05;

/// COCO joint names in index order.
pub const COCO_JOINTS: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("no joint reaches the confidence threshold {tau}")]
    NoValidJoints { tau: f64 },
    #[error("invalid keypoint: {0}")]
    InvalidKeypoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    /// Checked constructor used by ingestion: coordinates must be finite,
    /// confidence is clamped into `[0, 1]`.
    pub fn checked(x: f64, y: f64, confidence: f64) -> Result<Self, SkeletonError> {
        if !x.is_finite() || !y.is_finite() || !confidence.is_finite() {
            return Err(SkeletonError::InvalidKeypoint(format!(
                "non-finite value in ({x}, {y}, {confidence})"
            )));
        }
        Ok(Self { x, y, confidence: confidence.clamp(0.0, 1.0) })
    }
}

/// One person in one frame, joints in COCO order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FramePose {
    pub joints: [Keypoint; NUM_JOINTS],
}

impl FramePose {
    pub fn new(joints: [Keypoint; NUM_JOINTS]) -> Self {
        Self { joints }
    }
}

/// Exactly ten frames of one person.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub frames: [FramePose; NUM_FRAMES],
    pub source_id: String,
}

impl PoseSequence {
    pub fn new(frames: [FramePose; NUM_FRAMES], source_id: impl Into<String>) -> Self {
        Self { frames, source_id: source_id.into() }
    }

    fn valid_keypoints(&self, tau: f64) -> impl Iterator<Item = &Keypoint> + '_ {
        self.frames
            .iter()
            .flat_map(|f| f.joints.iter())
            .filter(move |k| k.confidence >= tau)
    }
}

/// Unit-square coordinates with explicit missing flags.
///
/// Missing joints carry the sentinel coordinate `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub coords: [[[f64; 2]; NUM_JOINTS]; NUM_FRAMES],
    pub missing: [[bool; NUM_JOINTS]; NUM_FRAMES],
    pub source_id: String,
}

impl NormalizedSequence {
    /// A sequence in which every joint is missing.
    pub fn all_missing(source_id: impl Into<String>) -> Self {
        Self {
            coords: [[[0.0; 2]; NUM_JOINTS]; NUM_FRAMES],
            missing: [[true; NUM_JOINTS]; NUM_FRAMES],
            source_id: source_id.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// Indices of joints whose confidence is at least `tau`, ascending.
pub fn valid_joints(pose: &FramePose, tau: f64) -> Vec<usize> {
    pose.joints
        .iter()
        .enumerate()
        .filter(|(_, k)| k.confidence >= tau)
        .map(|(i, _)| i)
        .collect()
}

/// Union box of all valid joints over all frames, grown by
/// `margin_frac * max(width, height)` on every side.
///
/// A zero-extent axis is widened to one pixel around its center before the
/// margin is applied.
pub fn sequence_bbox(seq: &PoseSequence, tau: f64, margin_frac: f64) -> Result<BBox, SkeletonError> {
    let mut it = seq.valid_keypoints(tau);
    let first = it.next().ok_or(SkeletonError::NoValidJoints { tau })?;
    let mut b = BBox { x_min: first.x, y_min: first.y, x_max: first.x, y_max: first.y };
    for k in it {
        b.x_min = b.x_min.min(k.x);
        b.x_max = b.x_max.max(k.x);
        b.y_min = b.y_min.min(k.y);
        b.y_max = b.y_max.max(k.y);
    }
    if b.x_max == b.x_min {
        b.x_min -= 0.5;
        b.x_max += 0.5;
    }
    if b.y_max == b.y_min {
        b.y_min -= 0.5;
        b.y_max += 0.5;
    }
    let margin = margin_frac * b.width().max(b.height());
    b.x_min -= margin;
    b.y_min -= margin;
    b.x_max += margin;
    b.y_max += margin;
    Ok(b)
}

/// Map every valid joint into the unit square of the sequence box.
pub fn normalize_sequence(
    seq: &PoseSequence,
    tau: f64,
    margin_frac: f64,
) -> Result<NormalizedSequence, SkeletonError> {
    let b = sequence_bbox(seq, tau, margin_frac)?;
    let (w, h) = (b.width(), b.height());
    let mut out = NormalizedSequence::all_missing(seq.source_id.clone());
    for (f, frame) in seq.frames.iter().enumerate() {
        for (j, k) in frame.joints.iter().enumerate() {
            if k.confidence >= tau {
                out.coords[f][j] = [
                    ((k.x - b.x_min) / w).clamp(0.0, 1.0),
                    ((k.y - b.y_min) / h).clamp(0.0, 1.0),
                ];
                out.missing[f][j] = false;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose_with(conf: f64) -> FramePose {
        let mut joints = [Keypoint::default(); NUM_JOINTS];
        for (i, k) in joints.iter_mut().enumerate() {
            *k = Keypoint::new(10.0 + i as f64, 20.0 + 2.0 * i as f64, conf);
        }
        FramePose::new(joints)
    }

    fn seq_of(frame: FramePose) -> PoseSequence {
        PoseSequence::new([frame; NUM_FRAMES], "s")
    }

    #[test]
    fn valid_joints_thresholds() {
        assert_eq!(valid_joints(&pose_with(1.0), 0.05), (0..17).collect::<Vec<_>>());
        assert!(valid_joints(&pose_with(0.0), 0.05).is_empty());
        let mut p = pose_with(1.0);
        p.joints[3].confidence = 0.04;
        let expected: Vec<usize> = (0..17).filter(|&i| i != 3).collect();
        assert_eq!(valid_joints(&p, 0.05), expected);
    }

    #[test]
    fn single_joint_box_gets_unit_extent() {
        let mut p = pose_with(0.0);
        p.joints[0] = Keypoint::new(100.0, 200.0, 1.0);
        let b = sequence_bbox(&seq_of(p), 0.05, 0.05).unwrap();
        assert_eq!(b.center(), (100.0, 200.0));
        assert!((b.width() - 1.1).abs() < 1e-12);
        assert!((b.height() - 1.1).abs() < 1e-12);
        let b0 = sequence_bbox(&seq_of(p), 0.05, 0.0).unwrap();
        assert_eq!((b0.width(), b0.height()), (1.0, 1.0));
    }

    #[test]
    fn box_spans_all_frames_with_margin() {
        let mut frames = [pose_with(0.0); NUM_FRAMES];
        frames[0].joints[0] = Keypoint::new(10.0, 20.0, 1.0);
        frames[9].joints[5] = Keypoint::new(110.0, 70.0, 1.0);
        frames[4].joints[2] = Keypoint::new(50.0, 40.0, 0.9);
        let seq = PoseSequence::new(frames, "s");
        let b = sequence_bbox(&seq, 0.05, 0.0).unwrap();
        assert_eq!(b, BBox { x_min: 10.0, y_min: 20.0, x_max: 110.0, y_max: 70.0 });
        let b = sequence_bbox(&seq, 0.05, 0.05).unwrap();
        assert_eq!(b, BBox { x_min: 5.0, y_min: 15.0, x_max: 115.0, y_max: 75.0 });
    }

    #[test]
    fn no_valid_joints_is_an_error() {
        let seq = seq_of(pose_with(0.01));
        assert_eq!(sequence_bbox(&seq, 0.05, 0.05), Err(SkeletonError::NoValidJoints { tau: 0.05 }));
        assert!(normalize_sequence(&seq, 0.05, 0.05).is_err());
    }

    #[test]
    fn corner_center_and_missing() {
        let mut frames = [pose_with(0.0); NUM_FRAMES];
        frames[0].joints[0] = Keypoint::new(0.0, 0.0, 1.0);
        frames[0].joints[1] = Keypoint::new(100.0, 50.0, 1.0);
        frames[0].joints[2] = Keypoint::new(50.0, 25.0, 1.0);
        frames[0].joints[3] = Keypoint::new(70.0, 30.0, 0.01);
        let n = normalize_sequence(&PoseSequence::new(frames, "s"), 0.05, 0.0).unwrap();
        assert_eq!(n.coords[0][0], [0.0, 0.0]);
        assert_eq!(n.coords[0][1], [1.0, 1.0]);
        assert_eq!(n.coords[0][2], [0.5, 0.5]);
        assert!(n.missing[0][3]);
        assert_eq!(n.coords[0][3], [0.0, 0.0]);
        assert!(!n.missing[0][2]);
    }

    fn arb_sequence() -> impl Strategy<Value = PoseSequence> {
        let kp = (-500.0f64..500.0, -500.0f64..500.0, 0.0f64..1.0)
            .prop_map(|(x, y, c)| Keypoint::new(x, y, c));
        proptest::collection::vec(kp, NUM_FRAMES * NUM_JOINTS).prop_map(|v| {
            let mut frames = [FramePose::default(); NUM_FRAMES];
            for (i, k) in v.into_iter().enumerate() {
                frames[i / NUM_JOINTS].joints[i % NUM_JOINTS] = k;
            }
            // Two well-separated anchors guarantee a non-degenerate box.
            frames[0].joints[0] = Keypoint::new(-600.0, -600.0, 1.0);
            frames[9].joints[16] = Keypoint::new(600.0, 650.0, 1.0);
            PoseSequence::new(frames, "p")
        })
    }

    proptest! {
        #[test]
        fn normalized_coords_in_unit_square(seq in arb_sequence(), margin in 0.0f64..0.3) {
            let n = normalize_sequence(&seq, DEFAULT_TAU, margin).unwrap();
            for f in 0..NUM_FRAMES {
                for j in 0..NUM_JOINTS {
                    let valid = seq.frames[f].joints[j].confidence >= DEFAULT_TAU;
                    prop_assert_eq!(n.missing[f][j], !valid);
                    for c in n.coords[f][j] {
                        prop_assert!((0.0..=1.0).contains(&c));
                    }
                    if !valid {
                        prop_assert_eq!(n.coords[f][j], [0.0, 0.0]);
                    }
                }
            }
        }

        #[test]
        fn translation_and_scale_invariant(
            seq in arb_sequence(),
            dx in -1000.0f64..1000.0,
            dy in -1000.0f64..1000.0,
            s in 0.1f64..10.0,
        ) {
            let mut moved = seq.clone();
            for fr in moved.frames.iter_mut() {
                for k in fr.joints.iter_mut() {
                    k.x = k.x * s + dx;
                    k.y = k.y * s + dy;
                }
            }
            let a = normalize_sequence(&seq, DEFAULT_TAU, DEFAULT_MARGIN_FRAC).unwrap();
            let b = normalize_sequence(&moved, DEFAULT_TAU, DEFAULT_MARGIN_FRAC).unwrap();
            prop_assert_eq!(a.missing, b.missing);
            for f in 0..NUM_FRAMES {
                for j in 0..NUM_JOINTS {
                    for c in 0..2 {
                        prop_assert!((a.coords[f][j][c] - b.coords[f][j][c]).abs() <= 1e-9);
                    }
                }
            }
        }
    }
}
