//! Few-exemplar fine-tuning for promptable segmentation, desk scale:
//! exemplar-guided data synthesis plus LoRA adaptation of a compact
//! ViT-based point-promptable segmenter, with training, DSC/HD95
//! evaluation, and ablation harnesses.

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod evaluation;
pub mod exemplar_selection;
pub mod experiment;
pub mod lora;
pub mod model;
pub mod scalar;
pub mod synthesis;
pub mod training;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training scalar.
pub type TrainScalar = f32;
/// Default evaluation / gradient-check scalar.
pub type EvalScalar = f64;

pub type Slice32 = data_io::LabeledSlice<f32>;
pub type Slice64 = data_io::LabeledSlice<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
