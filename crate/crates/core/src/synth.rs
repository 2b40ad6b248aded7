//! Parametric generator of labeled skeleton sequences.
//!
//! Five activity classes are produced by moving a fixed canonical skeleton
//! with a class-specific rule, evaluated at `t = i / 9` for the ten frames,
//! then adding Gaussian pixel noise. Every random draw is derived from a
//! counter-based seed so a dataset does not depend on generation order.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::LabeledSequence;
use crate::skeleton::{FramePose, Keypoint, PoseSequence, NUM_FRAMES, NUM_JOINTS};

/// Side length of the canonical square image, in pixels.
pub const FRAME_SIZE: f64 = 256.0;

pub const AMPLITUDE_RANGE: (f64, f64) = (0.05, 0.2);
pub const FREQUENCY_RANGE: (f64, f64) = (0.5, 2.0);

/// Canonical upright pose, `(x, y)` in a 256x256 image, COCO order.
pub const BASE_SKELETON: [(f64, f64); NUM_JOINTS] = [
    (128.0, 40.0),  // nose
    (134.0, 34.0),  // left_eye
    (122.0, 34.0),  // right_eye
    (142.0, 38.0),  // left_ear
    (114.0, 38.0),  // right_ear
    (156.0, 72.0),  // left_shoulder
    (100.0, 72.0),  // right_shoulder
    (166.0, 108.0), // left_elbow
    (90.0, 108.0),  // right_elbow
    (170.0, 142.0), // left_wrist
    (86.0, 142.0),  // right_wrist
    (146.0, 142.0), // left_hip
    (110.0, 142.0), // right_hip
    (148.0, 188.0), // left_knee
    (108.0, 188.0), // right_knee
    (150.0, 232.0), // left_ankle
    (106.0, 232.0), // right_ankle
];

const MIDLINE_X: f64 = 128.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown activity class {0:?} (expected one of wave, squat, jump, clap, march)")]
    UnknownClass(String),
    #[error("invalid motion parameters: {0}")]
    InvalidParams(String),
    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActivityClass {
    Wave,
    Squat,
    Jump,
    Clap,
    March,
}

impl ActivityClass {
    pub const ALL: [ActivityClass; 5] =
        [ActivityClass::Wave, ActivityClass::Squat, ActivityClass::Jump, ActivityClass::Clap, ActivityClass::March];

    pub fn name(self) -> &'static str {
        match self {
            ActivityClass::Wave => "wave",
            ActivityClass::Squat => "squat",
            ActivityClass::Jump => "jump",
            ActivityClass::Clap => "clap",
            ActivityClass::March => "march",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivityClass {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActivityClass::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| SynthError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    pub class: ActivityClass,
    /// Fraction of the frame size.
    pub amplitude: f64,
    /// Cycles per sequence.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
    /// Pixels.
    pub noise_sigma: f64,
}

impl MotionParams {
    /// Range check. Amplitude 0 is accepted as the degenerate static case.
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if !(self.amplitude == 0.0 || (AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1).contains(&self.amplitude)) {
            return bad(format!("amplitude {} outside [0.05, 0.2]", self.amplitude));
        }
        if !(FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1).contains(&self.frequency) {
            return bad(format!("frequency {} outside [0.5, 2]", self.frequency));
        }
        if !(0.0..2.0 * PI).contains(&self.phase) {
            return bad(format!("phase {} outside [0, 2pi)", self.phase));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: Vec<ActivityClass>,
    pub count: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: ActivityClass::ALL.to_vec(), count: 200, seed: 42, noise_sigma: 2.0 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.classes.is_empty() {
            return Err(SynthError::InvalidSpec("no classes".into()));
        }
        if self.count == 0 {
            return Err(SynthError::InvalidSpec("count must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SynthError::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn val_count(&self) -> usize {
        self.count.div_ceil(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Val => 0x76_616c,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub fn base_skeleton() -> FramePose {
    FramePose::new(BASE_SKELETON.map(|(x, y)| Keypoint::new(x, y, 1.0)))
}

/// Per-joint `(dx, dy)` pixel displacement of `class` at time `t` in `[0, 1]`.
pub fn displacement(params: &MotionParams, t: f64) -> [(f64, f64); NUM_JOINTS] {
    let a = params.amplitude * FRAME_SIZE;
    let theta = 2.0 * PI * params.frequency * t + params.phase;
    let mut d = [(0.0, 0.0); NUM_JOINTS];
    match params.class {
        ActivityClass::Wave => {
            d[10].1 = -a * theta.sin();
            d[8].1 = -0.5 * a * theta.sin();
        }
        ActivityClass::Squat => {
            let depth = a * (1.0 - theta.cos());
            for j in d.iter_mut().take(13) {
                j.1 = depth;
            }
            d[13] = (0.4 * depth, 0.5 * depth);
            d[14] = (-0.4 * depth, 0.5 * depth);
        }
        ActivityClass::Jump => {
            let lift = -a * (2.0 * PI * params.frequency * t).sin().max(0.0);
            for j in d.iter_mut() {
                j.1 = lift;
            }
        }
        ActivityClass::Clap => {
            // Wrists move toward the midline and back, meeting at most there.
            for w in [9, 10] {
                let gap = BASE_SKELETON[w].0 - MIDLINE_X;
                let inward = (a * (1.0 - theta.cos())).min(gap.abs());
                d[w].0 = -gap.signum() * inward;
            }
        }
        ActivityClass::March => {
            let s = theta.sin();
            let left = -a * s.max(0.0);
            let right = -a * (-s).max(0.0);
            d[13].1 = left;
            d[15].1 = left;
            d[14].1 = right;
            d[16].1 = right;
        }
    }
    d
}

/// Ten frames of `params.class` plus i.i.d. Gaussian noise seeded by `rng_seed`.
pub fn generate_sequence(params: &MotionParams, rng_seed: u64) -> LabeledSequence {
    generate_sequence_with_id(params, rng_seed, format!("synth-{}-{rng_seed:016x}", params.class))
}

fn generate_sequence_with_id(params: &MotionParams, rng_seed: u64, id: String) -> LabeledSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let base = base_skeleton();
    let mut frames = [base; NUM_FRAMES];
    for (i, frame) in frames.iter_mut().enumerate() {
        let t = i as f64 / (NUM_FRAMES - 1) as f64;
        let d = displacement(params, t);
        for (j, k) in frame.joints.iter_mut().enumerate() {
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            k.x += d[j].0 + params.noise_sigma * nx;
            k.y += d[j].1 + params.noise_sigma * ny;
        }
    }
    LabeledSequence { seq: PoseSequence::new(frames, id), label: params.class.name().to_string() }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a sequence of words into one seed (splitmix64 chaining).
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6b70_6c6d_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Parameters and noise seed for one dataset item.
pub fn item_params(spec: &SynthSpec, class: ActivityClass, index: usize, split: Split) -> (MotionParams, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, class.tag(), index as u64, split.tag()]));
    let params = MotionParams {
        class,
        amplitude: rng.gen_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
        frequency: rng.gen_range(FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1),
        phase: rng.gen_range(0.0..2.0 * PI),
        noise_sigma: spec.noise_sigma,
    };
    (params, rng.gen())
}

fn generate_split(spec: &SynthSpec, split: Split, per_class: usize) -> Vec<LabeledSequence> {
    let jobs: Vec<(ActivityClass, usize)> =
        spec.classes.iter().flat_map(|&c| (0..per_class).map(move |i| (c, i))).collect();
    jobs.par_iter()
        .map(|&(class, index)| {
            let (params, noise_seed) = item_params(spec, class, index, split);
            let id = format!("synth-{}-{}-{index:05}", split.name(), class);
            generate_sequence_with_id(&params, noise_seed, id)
        })
        .collect()
}

/// `count` training and `ceil(count / 4)` validation sequences per class,
/// ordered class-major in `spec.classes` order.
pub fn generate_dataset(spec: &SynthSpec) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>), SynthError> {
    spec.validate()?;
    Ok((generate_split(spec, Split::Train, spec.count), generate_split(spec, Split::Val, spec.val_count())))
}
