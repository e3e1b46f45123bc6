//! Miniature deformable detection transformer.
//!
//! Conv backbone -> 1x1 projection to tokens -> dense-attention encoder ->
//! decoder whose cross-attention is deformable and traced -> class and box
//! heads. Training uses Hungarian set matching and a CE + L1 + GIoU loss.

pub mod backbone;
pub mod boxes;
pub mod decoder;
pub mod deformable;
pub mod encoder;
pub mod loss;
pub mod matcher;
pub mod model;
pub mod types;

pub use deformable::{AttentionTrace, SamplePoint};
pub use loss::{batch_detection_loss, detection_loss, BatchDetectionLoss, DetectionLoss};
pub use matcher::{hungarian_match, linear_assignment, LossWeights};
pub use model::{Detector, DetectorOutput, ModelConfig};
pub use types::{
    DetectionSet, FeatureGrid, GroundTruthObject, GroundTruthSet, ImageTensor, MatchResult,
    QuerySet, Tap, TokenSequence,
};
