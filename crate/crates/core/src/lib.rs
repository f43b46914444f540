//! Attention-modulated recalibration of class activation maps for weakly
//! supervised segmentation, built on a small deterministic tensor engine.

pub mod amm;
pub mod error;
pub mod harness;
pub mod modulation;
pub mod network;
pub mod numcore;
pub mod recalib;
pub mod synthdata;

pub use error::{Error, Result};
