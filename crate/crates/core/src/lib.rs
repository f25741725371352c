//! Möbius-transformation attention at desk scale.
//!
//! Layers, from the bottom up:
//! - [`complex`], [`tensor`], [`ctensor`]: extended complex scalars and split-plane tensors
//! - [`geometry`]: Möbius maps, fixed points and geometry classification
//! - [`autodiff`]: a reverse-mode tape over real tensors
//! - [`attention`]: vanilla, Möbius and rotary attention plus the mixed-head and dual-channel blocks
//! - [`model`]: encoder assembly, parameter counting and checkpoints
//! - [`trainer`]: masking, synthetic tasks, AdamW with warmup/decay and the training loop
//! - [`analysis`]: geometry census, attention sparsity, flow export and CSV helpers

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod complex;
pub mod config;
pub mod ctensor;
pub mod error;
pub mod geometry;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use complex::ExtendedComplex;
pub use ctensor::ComplexTensor;
pub use error::{Error, Result};
pub use tensor::Tensor;
