//! Synthetic data, training, evaluation, parameter accounting and gate
//! diagnostics.

pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod eval;
pub mod params;
pub mod scene;
pub mod train;

pub use diagnostics::{gate_diagnostics, GateDiagnostics};
pub use eval::{average_precision, evaluate, EvalReport};
pub use params::{count_params, ParamTable};
pub use scene::{generate_scene, SceneAnnotation, SizeBucket, SizeMix};
pub use train::{train, TrainConfig, TrainOutcome};
