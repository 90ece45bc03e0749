//! Graph engine for multilayer multimodal CNN fusion.
//!
//! The crate covers the full path from layer graphs to evaluation:
//!
//! * [`tensor`]: dense `f64` tensors.
//! * [`graph`]: layer vocabulary, DAG validation, shape inference and
//!   parameter accounting, plus ledger verification.
//! * [`fdsfm`]: pooling planner that fuses feature maps of different sizes.
//! * [`exec`], [`loss`], [`optim`], [`params`], [`gradcheck`]:
//!   forward/backward execution, softmax and cross-entropy, Adam,
//!   parameter stores and checkpoints, finite-difference checks.
//! * [`models`]: the full-size backbones and fusion variants, and small
//!   trainable twins.
//! * [`data`]: image preprocessing, augmentation, synthetic data, splits.
//! * [`eval`]: metrics, ROC/AUC, Grad-CAM and report emission.
//! * [`train`]: the training loop.

pub mod data;
pub mod eval;
pub mod exec;
pub mod fdsfm;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod models;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use graph::{summarize, GraphBuilder, LayerSpec, ModelGraph, NodeId, Padding, ParamCount, Summary};
pub use tensor::{Shape, Tensor};
