//! Thermal-image absolute pose regression: preprocessing, a hybrid
//! MBConv/transformer backbone, pose loss, dataset handling, and the training
//! and evaluation harness.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod preproc;
pub mod quat;

pub use error::{Error, Result};
