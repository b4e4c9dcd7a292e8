//! Dual-branch weakly supervised segmentation under cross-resolution label
//! supervision.
//!
//! The crate has three layers:
//!
//! * data: label spaces and class unification ([`label_space`]), synthetic
//!   cross-resolution scene generation ([`synthdata`]), raster containers
//!   ([`grid`]) and on-disk datasets ([`dataset`]);
//! * model: a small denoising diffusion network used as a frozen feature
//!   extractor ([`diffusion`]), a patch transformer branch ([`transformer`]),
//!   and prototype-based confidence-masked supervision ([`supervision`]),
//!   all built on the tensor backend in [`nn`];
//! * harness: configuration, checkpoints, training/prediction/evaluation
//!   drivers ([`harness`]), and segmentation metrics ([`eval`]).
//!
//! Everything is CPU-only and deterministic given a seed.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod grid;
pub mod harness;
pub mod label_space;
pub mod nn;
pub mod supervision;
pub mod synthdata;
pub mod transformer;

pub use error::{Error, Result};
