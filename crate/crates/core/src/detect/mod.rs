//! SSD-style multi-scale prediction: default boxes, matching, multibox loss,
//! decoding and non-maximum suppression.

pub mod boxes;
pub mod head;
pub mod loss;
pub mod matching;
pub mod nms;
pub mod priors;

pub use boxes::{decode, encode, iou, BBox};
pub use head::{predict_heads, DetectHead, HeadVars, Predictor};
pub use loss::{multibox_loss, smooth_l1, LossOutput};
pub use matching::{match_priors, GroundTruth, MatchResult, MATCH_THRESHOLD};
pub use nms::{decode_and_nms, nms, softmax_rows, DecodeParams, Detection};
pub use priors::{generate_priors, PriorBox, PriorConfig};
