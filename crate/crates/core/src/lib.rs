//! Gated feature reuse for one-stage detectors.
//!
//! The crate contains a small f64 tensor engine with reverse-mode gradients
//! ([`tensor`]), the two-level attention gate ([`gate`]), the six-scale
//! feature-reuse pyramid ([`pyramid`]), an SSD-style prediction head
//! ([`detect`]) and the synthetic-data training and evaluation harness
//! ([`harness`]).

pub mod config;
pub mod detect;
pub mod error;
pub mod gate;
pub mod harness;
pub mod layers;
pub mod model;
pub mod pyramid;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use gate::{apply_gate, GateInit, GateOutput, GateParams};
pub use model::{Detector, ModelConfig, Prediction};
pub use pyramid::{Pyramid, PyramidConfig, PyramidState};
pub use tensor::{FeatureMap, ParamId, ParamStore, ParamTensor, Sgd, Tape, Var};
