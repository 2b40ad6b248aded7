//! Activity recognition as label generation over pose keypoint tokens.
//!
//! The pipeline: AlphaPose results (or synthetic skeletons) become ten-frame
//! [`PoseSequence`]s, are normalized into a shared bounding box, quantized
//! into bin tokens, and fed to a small decoder-only transformer trained to
//! emit the activity label after a `[GEN]` delimiter.

pub mod codec;
pub mod dataset;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod oracle;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use codec::{TokenId, TokenSeq, Vocabulary};
pub use ingest::LabeledSequence;
pub use model::{Batch, ModelConfig, ModelParams};
pub use skeleton::{FramePose, Keypoint, NormalizedSequence, PoseSequence};
