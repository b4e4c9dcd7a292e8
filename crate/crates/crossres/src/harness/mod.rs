//! Orchestration: dataset generation, denoiser pretraining, dual-branch
//! training, tiled prediction, evaluation, and the ablation suite.

pub mod ablate;
pub mod data;
pub mod model;
pub mod predict;
pub mod probe;
pub mod trainer;
