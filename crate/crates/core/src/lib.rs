//! Masked-autoencoder workbench for musculoskeletal radiographs.

pub mod checkpoint;
pub mod datamodel;
pub mod error;
pub mod errormap;
pub mod evalstat;
pub mod finetune;
pub mod mae;
pub mod multihead;
pub mod nn;
pub mod synthgen;

pub use candle_core;
pub use error::{Error, Result};
